//! Hard-parameter-sharing multi-task networks.
//!
//! A shared encoder exposes one tap per stride-2 stage; each task owns a
//! decoder. Three decoder variants are available: `baseline` (two 3x3 layers
//! on the last tap), `context` (baseline behind a shared ASPP block) and
//! `ushape` (coarse-to-fine fusion with the earlier taps).

use std::path::Path;

use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::data::tnsr::{self, StoredTensor};
use crate::error::{Error, Result};
use crate::layers::{Aspp, Conv, ConvBnRelu, Init};
use crate::tensor::{dims4, Conv2dSpec, Graph, ParamKind, ParamSet, ParamTag, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Context,
    Ushape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segmentation,
    Depth,
    Normal,
}

impl TaskKind {
    pub fn short(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "seg",
            TaskKind::Depth => "depth",
            TaskKind::Normal => "normal",
        }
    }

    /// Metrics reported for this kind, primary metric first.
    pub fn metric_ids(self) -> &'static [&'static str] {
        match self {
            TaskKind::Segmentation => &["miou", "pixacc"],
            TaskKind::Depth => &["rel", "rms"],
            TaskKind::Normal => &["angle"],
        }
    }

    pub fn loss_id(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "cross_entropy",
            TaskKind::Depth => "l1",
            TaskKind::Normal => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Class count; only meaningful for segmentation.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub classes: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl TaskSpec {
    pub fn segmentation(classes: usize) -> Self {
        Self {
            kind: TaskKind::Segmentation,
            classes,
        }
    }

    pub fn depth() -> Self {
        Self {
            kind: TaskKind::Depth,
            classes: 0,
        }
    }

    pub fn normal() -> Self {
        Self {
            kind: TaskKind::Normal,
            classes: 0,
        }
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            TaskKind::Segmentation => self.classes,
            TaskKind::Depth => 1,
            TaskKind::Normal => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub tasks: Vec<TaskSpec>,
    pub input_hw: (usize, usize),
    pub stem_channels: usize,
    /// Output channels of each stride-2 stage; also the tap channels.
    pub stage_channels: Vec<usize>,
    pub decoder_channels: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, tasks: Vec<TaskSpec>, input_hw: (usize, usize)) -> Self {
        Self {
            variant,
            tasks,
            input_hw,
            stem_channels: 8,
            stage_channels: vec![8, 16, 24, 32],
            decoder_channels: 32,
        }
    }

    pub fn taps(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn tap_hw(&self, p: usize) -> (usize, usize) {
        (self.input_hw.0 >> (p + 1), self.input_hw.1 >> (p + 1))
    }

    fn validate(&self) -> Result<()> {
        let t = self.tasks.len();
        if !(1..=3).contains(&t) {
            return Err(Error::Config(format!("between 1 and 3 tasks are supported, got {t}")));
        }
        for (i, a) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|b| b.kind == a.kind) {
                return Err(Error::Config(format!("task kind `{}` listed twice", a.kind.short())));
            }
            if a.kind == TaskKind::Segmentation && a.classes < 2 {
                return Err(Error::Config("segmentation needs at least 2 classes".into()));
            }
        }
        let p = self.taps();
        if p == 0 {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        let div = 1usize << p;
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by 2^{p}")));
        }
        if self.variant == Variant::Ushape && p < 2 {
            return Err(Error::Config("ushape decoder needs at least two taps".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Decoder {
    Plain {
        c1: ConvBnRelu,
        c2: ConvBnRelu,
        head: Conv,
    },
    Fuse {
        steps: Vec<ConvBnRelu>,
        head: Conv,
    },
}

/// Network structure; parameter values live in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct MtlModel {
    pub cfg: ModelConfig,
    stem: ConvBnRelu,
    stages: Vec<(ConvBnRelu, ConvBnRelu)>,
    context: Option<Aspp>,
    decoders: Vec<Decoder>,
}

pub struct MainOutput {
    /// Per-task predictions at input resolution.
    pub preds: Vec<Var>,
    /// Stage outputs `O_1..O_P`, finest first.
    pub taps: Vec<Var>,
}

pub fn build_model<T: Real>(cfg: &ModelConfig, ps: &mut ParamSet<T>, rng: &mut Pcg64) -> Result<MtlModel> {
    cfg.validate()?;
    let mut init = Init::new(ps, rng, ParamTag::Shared);
    let stem = ConvBnRelu::build(&mut init, "enc.stem", (3, cfg.stem_channels, 3), Conv2dSpec::same(3, 1))?;
    let mut stages = Vec::new();
    let mut cin = cfg.stem_channels;
    for (p, &c) in cfg.stage_channels.iter().enumerate() {
        let down = Conv2dSpec {
            stride: 2,
            ..Conv2dSpec::same(3, 1)
        };
        stages.push((
            ConvBnRelu::build(&mut init, &format!("enc.s{}.down", p + 1), (cin, c, 3), down)?,
            ConvBnRelu::build(&mut init, &format!("enc.s{}.conv", p + 1), (c, c, 3), Conv2dSpec::same(3, 1))?,
        ));
        cin = c;
    }
    let last = cin;
    let context = match cfg.variant {
        Variant::Context => Some(Aspp::build(&mut init, "ctx.aspp", last, last)?),
        _ => None,
    };
    let d = cfg.decoder_channels;
    let mut decoders = Vec::new();
    for (t, task) in cfg.tasks.iter().enumerate() {
        let mut init = init.with_tag(ParamTag::Task(t));
        let name = format!("dec.{}", task.kind.short());
        let dec = match cfg.variant {
            Variant::Baseline | Variant::Context => Decoder::Plain {
                c1: ConvBnRelu::build(&mut init, &format!("{name}.c1"), (last, d, 3), Conv2dSpec::same(3, 1))?,
                c2: ConvBnRelu::build(&mut init, &format!("{name}.c2"), (d, d, 3), Conv2dSpec::same(3, 1))?,
                head: Conv::build(&mut init, &format!("{name}.head"), (d, task.channels(), 1), Conv2dSpec::default(), true)?,
            },
            Variant::Ushape => {
                let width = d / 2;
                let mut steps = Vec::new();
                let mut c = last;
                for p in (0..cfg.taps() - 1).rev() {
                    let cin = c + cfg.stage_channels[p];
                    steps.push(ConvBnRelu::build(
                        &mut init,
                        &format!("{name}.fuse{}", p + 1),
                        (cin, width, 3),
                        Conv2dSpec::same(3, 1),
                    )?);
                    c = width;
                }
                Decoder::Fuse {
                    steps,
                    head: Conv::build(&mut init, &format!("{name}.head"), (c, task.channels(), 1), Conv2dSpec::default(), true)?,
                }
            }
        };
        decoders.push(dec);
    }
    Ok(MtlModel {
        cfg: cfg.clone(),
        stem,
        stages,
        context,
        decoders,
    })
}

/// Upsamples raw head output to `hw` and applies the task's output map:
/// identity logits, softplus depth or unit normals.
pub fn finish_head<T: Real>(g: &mut Graph<T>, kind: TaskKind, raw: Var, hw: (usize, usize)) -> Result<Var> {
    let (_, _, h, w) = dims4(g.shape(raw))?;
    let up = if (h, w) == hw {
        raw
    } else {
        g.bilinear_resize(raw, hw.0, hw.1, false)?
    };
    match kind {
        TaskKind::Segmentation => Ok(up),
        TaskKind::Depth => g.softplus(up),
        TaskKind::Normal => g.l2_normalize_channels(up, T::lit(1e-12)),
    }
}

fn scoped<T: Real, R>(g: &mut Graph<T>, scope: &str, f: impl FnOnce(&mut Graph<T>) -> Result<R>) -> Result<R> {
    g.push_scope(scope);
    let r = f(g);
    g.pop_scope();
    r
}

impl MtlModel {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.cfg.tasks
    }

    /// Encoder only: the P taps.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = dims4(g.shape(x))?;
        if c != 3 || (h, w) != self.cfg.input_hw {
            return Err(Error::dim(
                "forward_main",
                format!("input {:?}, model expects 3x{}x{}", g.shape(x), self.cfg.input_hw.0, self.cfg.input_hw.1),
            ));
        }
        let mut y = scoped(g, "enc.stem", |g| self.stem.forward(g, ps, x))?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for (p, (down, conv)) in self.stages.iter().enumerate() {
            y = scoped(g, &format!("enc.s{}", p + 1), |g| {
                let z = down.forward(g, ps, y)?;
                conv.forward(g, ps, z)
            })?;
            taps.push(y);
        }
        Ok(taps)
    }

    /// Prediction of task `t` from the encoder taps.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, taps: &[Var], t: usize, ctx: Option<Var>) -> Result<Var> {
        let task = self.cfg.tasks[t];
        let last = *taps.last().expect("at least one tap");
        scoped(g, &format!("dec.{}", task.kind.short()), |g| {
            let raw = match &self.decoders[t] {
                Decoder::Plain { c1, c2, head } => {
                    let y = c1.forward(g, ps, ctx.unwrap_or(last))?;
                    let y = c2.forward(g, ps, y)?;
                    head.forward(g, ps, y)?
                }
                Decoder::Fuse { steps, head } => {
                    let mut y = last;
                    for (step, &tap) in steps.iter().zip(taps[..taps.len() - 1].iter().rev()) {
                        let (_, _, h, w) = dims4(g.shape(tap))?;
                        let up = g.bilinear_resize(y, h, w, false)?;
                        let cat = g.concat_channels(&[up, tap])?;
                        y = step.forward(g, ps, cat)?;
                    }
                    head.forward(g, ps, y)?
                }
            };
            finish_head(g, task.kind, raw, self.cfg.input_hw)
        })
    }

    pub fn forward_main<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<MainOutput> {
        let taps = self.encode(g, ps, x)?;
        let ctx = match &self.context {
            Some(aspp) => Some(scoped(g, "ctx.aspp", |g| aspp.forward(g, ps, *taps.last().unwrap()))?),
            None => None,
        };
        let preds = (0..self.cfg.tasks.len())
            .map(|t| self.decode(g, ps, &taps, t, ctx))
            .collect::<Result<Vec<_>>>()?;
        Ok(MainOutput { preds, taps })
    }
}

const CKPT_MAGIC: &[u8; 4] = b"AMCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tag: ParamTag,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: Variant,
    pub tasks: Vec<TaskSpec>,
    pub tap_channels: Vec<usize>,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
}

fn to_stored<T: Real>(t: &crate::tensor::Tensor<T>) -> StoredTensor {
    match T::DTYPE {
        crate::tensor::DType::F64 => StoredTensor::F64(t.cast()),
        _ => StoredTensor::F32(t.cast()),
    }
}

/// Serializes `cfg` and every entry of `ps` (weights and buffers).
///
/// Layout: magic `AMCK`, `u32` version, `u32` header length, JSON header,
/// then one TNSR record per parameter in header order.
pub fn encode_checkpoint<T: Real>(cfg: &ModelConfig, ps: &ParamSet<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        variant: cfg.variant,
        tasks: cfg.tasks.clone(),
        tap_channels: cfg.stage_channels.clone(),
        model: cfg.clone(),
        params: ps
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.to_string(),
                tag: p.tag,
                kind: p.kind,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in ps.iter() {
        tnsr::encode(&to_stored(&p.value), &mut out)?;
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamSet<T>)> {
    if bytes.len() < 12 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut pos = 12 + len;
    let mut ps = ParamSet::new();
    for entry in &header.params {
        let (t, used) = tnsr::decode(&bytes[pos..])?;
        pos += used;
        ps.insert(entry.name.clone(), t.to_f64()?.cast(), entry.tag, entry.kind)?;
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - pos)));
    }
    Ok((header, ps))
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, cfg: &ModelConfig, ps: &ParamSet<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(cfg, ps)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ParamSet<T>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Copies values of every entry of `src` selected by `pred` into `dst`,
/// which must hold the same paths and shapes. Returns the number copied.
pub fn transfer_params<T: Real>(dst: &mut ParamSet<T>, src: &ParamSet<T>, pred: impl Fn(ParamTag) -> bool) -> Result<usize> {
    let mut n = 0;
    for (name, p) in src.iter().filter(|(_, p)| pred(p.tag)) {
        let d = dst.get_mut(name).map_err(|_| Error::Config(format!("checkpoint parameter `{name}` not in model")))?;
        if d.value.shape() != p.value.shape() {
            return Err(Error::Config(format!(
                "parameter `{name}`: checkpoint shape {:?}, model {:?}",
                p.value.shape(),
                d.value.shape()
            )));
        }
        d.value = p.value.clone();
        n += 1;
    }
    Ok(n)
}
