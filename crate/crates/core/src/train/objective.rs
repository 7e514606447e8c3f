use rand_pcg::Pcg64;

use super::losses::{loss_depth, loss_normal, loss_segmentation};
use super::strategy::Strategy;
use crate::auxiliary::{build_basic_aux, build_from_genotype, AuxModules, LocationRule};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::{AggOp, Conv, Init};
use crate::mtl_net::{build_model, finish_head, ModelConfig, MtlModel, TaskKind, TaskSpec};
use crate::tensor::{Conv2dSpec, Graph, ParamSet, ParamTag, Real, Tensor, Var};

/// Weight of the deep-supervision losses.
pub const DS_SCALE: f64 = 0.1;

/// Inputs and targets of one mini-batch, channel-major.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub image: Tensor<T>,
    pub seg: Vec<u8>,
    pub depth: Tensor<T>,
    pub normal: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (h, w) = (first.h, first.w);
        if samples.iter().any(|s| (s.h, s.w) != (h, w)) {
            return Err(Error::Data("samples of one batch differ in size".into()));
        }
        let n = samples.len();
        let cat = |f: &dyn Fn(&Sample) -> &[f32]| -> Vec<T> {
            samples.iter().flat_map(|s| f(s).iter().map(|&v| T::lit(v as f64))).collect()
        };
        Ok(Self {
            image: Tensor::new([n, 3, h, w], cat(&|s| &s.image))?,
            seg: samples.iter().flat_map(|s| s.seg.iter().copied()).collect(),
            depth: Tensor::new([n, 1, h, w], cat(&|s| &s.depth))?,
            normal: Tensor::new([n, 3, h, w], cat(&|s| &s.normal))?,
        })
    }

    pub fn len(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss of one task's prediction against the batch targets.
pub fn task_loss<T: Real>(g: &mut Graph<T>, task: TaskSpec, pred: Var, batch: &Batch<T>) -> Result<Var> {
    match task.kind {
        TaskKind::Segmentation => loss_segmentation(g, pred, &batch.seg, task.classes),
        TaskKind::Depth => loss_depth(g, pred, &batch.depth),
        TaskKind::Normal => loss_normal(g, pred, &batch.normal),
    }
}

/// One light head per tap for deep supervision of a task.
#[derive(Debug, Clone)]
pub struct DsHeads {
    pub task: usize,
    heads: Vec<Conv>,
}

impl DsHeads {
    pub fn build<T: Real>(cfg: &ModelConfig, task: usize, ps: &mut ParamSet<T>, rng: &mut Pcg64) -> Result<Self> {
        let spec = cfg.tasks[task];
        let mut init = Init::new(ps, rng, ParamTag::Aux(task));
        let heads = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(p, &c)| {
                Conv::build(
                    &mut init,
                    &format!("ds.{}.head{p}", spec.kind.short()),
                    (c, spec.channels(), 1),
                    Conv2dSpec::default(),
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { task, heads })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, cfg: &ModelConfig, taps: &[Var]) -> Result<Vec<Var>> {
        let kind = cfg.tasks[self.task].kind;
        g.push_scope("ds");
        let r = self
            .heads
            .iter()
            .zip(taps)
            .map(|(h, &tap)| {
                let raw = h.forward(g, ps, tap)?;
                finish_head(g, kind, raw, cfg.input_hw)
            })
            .collect();
        g.pop_scope();
        r
    }
}

pub fn kendall_path(kind: TaskKind) -> String {
    format!("kendall.{}.s", kind.short())
}

/// Everything a strategy trains: the network plus its train-time extras.
#[derive(Debug, Clone)]
pub struct TrainModules {
    pub model: MtlModel,
    pub aux: Option<AuxModules>,
    pub ds: Option<DsHeads>,
    pub kendall: bool,
}

fn check_task(t: usize, cfg: &ModelConfig) -> Result<()> {
    if t >= cfg.tasks.len() {
        return Err(Error::Config(format!(
            "strategy task t{} but the model has {} tasks",
            t + 1,
            cfg.tasks.len()
        )));
    }
    Ok(())
}

/// Builds the modules of `strategy` over the task list of `cfg`. `Single(t)`
/// keeps only task `t`. The main network is initialized first, so
/// strategies sharing a seed start from the same main weights.
pub fn build_modules<T: Real>(
    strategy: &Strategy,
    cfg: &ModelConfig,
    agg: AggOp,
    ps: &mut ParamSet<T>,
    rng: &mut Pcg64,
) -> Result<TrainModules> {
    if let Some(t) = strategy.task() {
        check_task(t, cfg)?;
    }
    let model_cfg = match *strategy {
        Strategy::Single(t) => ModelConfig {
            tasks: vec![cfg.tasks[t]],
            ..cfg.clone()
        },
        _ => cfg.clone(),
    };
    if strategy.donor_task(cfg.tasks.len()).is_none() && matches!(strategy, Strategy::AuxiSingle(_)) {
        return Err(Error::Config("auxi-tN needs a second task to initialize from".into()));
    }
    let model = build_model(&model_cfg, ps, rng)?;
    let all: Vec<usize> = (0..cfg.tasks.len()).collect();
    let mut m = TrainModules {
        model,
        aux: None,
        ds: None,
        kendall: false,
    };
    match strategy {
        Strategy::Single(_) | Strategy::Joint | Strategy::Prior(_) => {}
        Strategy::DeepSupervision(t) => m.ds = Some(DsHeads::build(cfg, *t, ps, rng)?),
        Strategy::Kendall => {
            for (t, task) in cfg.tasks.iter().enumerate() {
                ps.insert(
                    kendall_path(task.kind),
                    Tensor::scalar(T::zero()),
                    ParamTag::Weighting(t),
                    crate::tensor::ParamKind::Weight,
                )?;
            }
            m.kendall = true;
        }
        Strategy::AuxiSingle(t) => m.aux = Some(build_basic_aux(cfg, &[*t], agg, ps, rng)?),
        Strategy::AuxiBoth => m.aux = Some(build_basic_aux(cfg, &all, agg, ps, rng)?),
        Strategy::AuxiNas(geno) => m.aux = Some(build_from_genotype(geno, cfg, LocationRule::default(), ps, rng)?),
    }
    Ok(m)
}

/// The pieces of one evaluation of the training objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    /// Main loss per model task.
    pub main: Vec<Var>,
    /// `(task, loss)` of each auxiliary head.
    pub aux: Vec<(usize, Var)>,
    /// Unscaled sum of the deep-supervision losses.
    pub ds: Option<Var>,
    pub preds: Vec<Var>,
}

fn check_modules(m: &TrainModules, strategy: &Strategy) -> Result<()> {
    let t_all = m.model.cfg.tasks.len();
    let aux_tasks = m.aux.as_ref().map(|a| a.tasks());
    let ok = match strategy {
        Strategy::Single(_) => t_all == 1 && aux_tasks.is_none() && m.ds.is_none() && !m.kendall,
        Strategy::Joint | Strategy::Prior(_) => aux_tasks.is_none() && m.ds.is_none() && !m.kendall,
        Strategy::DeepSupervision(t) => aux_tasks.is_none() && m.ds.as_ref().map(|d| d.task) == Some(*t) && !m.kendall,
        Strategy::Kendall => aux_tasks.is_none() && m.ds.is_none() && m.kendall,
        Strategy::AuxiSingle(t) => aux_tasks == Some(vec![*t]) && m.ds.is_none() && !m.kendall,
        Strategy::AuxiBoth | Strategy::AuxiNas(_) => {
            aux_tasks == Some((0..t_all).collect()) && m.ds.is_none() && !m.kendall
        }
    };
    if !ok {
        return Err(Error::Config(format!("modules do not match strategy {strategy}")));
    }
    Ok(())
}

fn sum<T: Real>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Training loss of `strategy` on `batch`: the unit-weighted sum of task
/// losses, plus the auxiliary losses, the scaled deep-supervision losses or
/// the learned uncertainty weighting, as the strategy prescribes.
pub fn joint_objective<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    m: &TrainModules,
    batch: &Batch<T>,
    strategy: &Strategy,
) -> Result<Objective> {
    check_modules(m, strategy)?;
    let cfg = &m.model.cfg;
    let x = g.constant(batch.image.clone());
    let out = m.model.forward_main(g, ps, x)?;
    let mut main = Vec::with_capacity(out.preds.len());
    for (t, &pred) in out.preds.iter().enumerate() {
        main.push(task_loss(g, cfg.tasks[t], pred, batch)?);
    }
    let mut terms = Vec::with_capacity(main.len());
    if m.kendall {
        for (t, &l) in main.iter().enumerate() {
            let s = g.param(ps, &kendall_path(cfg.tasks[t].kind))?;
            let neg = g.scale(s, -T::one())?;
            let w = g.exp(neg)?;
            let weighted = g.mul(w, l)?;
            let half = g.scale(s, T::lit(0.5))?;
            terms.push(g.add(weighted, half)?);
        }
    } else {
        terms.extend(&main);
    }
    let mut total = sum(g, &terms)?;

    let mut aux = Vec::new();
    if let Some(a) = &m.aux {
        for (t, pred) in a.forward(g, ps, &out.taps, cfg.input_hw)? {
            let l = task_loss(g, cfg.tasks[t], pred, batch)?;
            aux.push((t, l));
            total = g.add(total, l)?;
        }
    }
    let mut ds = None;
    if let Some(d) = &m.ds {
        let preds = d.forward(g, ps, cfg, &out.taps)?;
        let losses = preds
            .into_iter()
            .map(|p| task_loss(g, cfg.tasks[d.task], p, batch))
            .collect::<Result<Vec<_>>>()?;
        let s = sum(g, &losses)?;
        let scaled = g.scale(s, T::lit(DS_SCALE))?;
        total = g.add(total, scaled)?;
        ds = Some(s);
    }
    Ok(Objective {
        total,
        main,
        aux,
        ds,
        preds: out.preds,
    })
}
