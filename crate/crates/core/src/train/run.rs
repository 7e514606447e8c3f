use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::{Pcg32, Pcg64};
use serde::{Deserialize, Serialize};

use super::metrics::{argmax_classes, metric_mean_angle, metric_miou, metric_pixel_acc, metric_rel, metric_rms, Metrics};
use super::objective::{build_modules, joint_objective, Batch, TrainModules};
use super::optim::{poly_lr, Sgd};
use super::probe::{GradProbe, DEFAULT_PROBE_LAYERS};
use super::strategy::Strategy;
use crate::auxiliary::strip_aux;
use crate::data::{augment, AugmentConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::layers::{AggOp, BN_MOMENTUM};
use crate::mtl_net::{transfer_params, ModelConfig, MtlModel, TaskKind};
use crate::tensor::{Graph, ParamSet, ParamTag, Real};

/// Divisor of the initial learning rate for runs initialized from a donor.
pub const LR_DIVISOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr0: f64,
    pub batch: usize,
    pub wd: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate on the held-out split every this many iterations (and at the end).
    pub eval_every: usize,
    pub eval_batch: usize,
    pub augment: AugmentConfig,
    pub probe_layers: Vec<String>,
    pub probe_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            lr0: 0.01,
            batch: 12,
            wd: 1e-4,
            momentum: 0.9,
            seed: 0,
            eval_every: 500,
            eval_batch: 32,
            augment: AugmentConfig::default(),
            probe_layers: DEFAULT_PROBE_LAYERS.iter().map(|s| s.to_string()).collect(),
            probe_samples: 32,
        }
    }
}

/// Run inputs that are not part of the serialized training config.
#[derive(Debug, Clone)]
pub struct RunOptions<'a> {
    pub agg: AggOp,
    /// Parameters of the `Single` model that seeds `Prior` / `AuxiSingle`.
    pub donor: Option<&'a ParamSet<f32>>,
    pub train_split: &'a str,
    pub eval_split: &'a str,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            agg: AggOp::Concat,
            donor: None,
            train_split: "train",
            eval_split: "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub losses: Vec<f64>,
    pub probes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub iter: usize,
    pub metrics: Metrics,
}

/// Per-iteration telemetry and periodic evaluations of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub loss_columns: Vec<String>,
    pub probe_columns: Vec<String>,
    pub rows: Vec<IterRow>,
    pub evals: Vec<EvalRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    pub fn run_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss_total");
        for c in self.loss_columns.iter().chain(&self.probe_columns) {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{},{}", r.iter, r.lr, r.loss_total).unwrap();
            for v in r.losses.iter().chain(&r.probes) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// `rel` is a fraction and `angle` is in degrees.
    pub fn eval_csv(&self) -> String {
        let mut s = String::from("iter,miou,pixacc,rel,rms,angle\n");
        for e in &self.evals {
            write!(s, "{}", e.iter).unwrap();
            for v in e.metrics.values() {
                write!(s, ",{}", opt(v)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, body) in [("run.csv", self.run_csv()), ("eval.csv", self.eval_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Sum over iterations of each probe column.
    pub fn probe_totals(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.probe_columns.len()];
        for r in &self.rows {
            for (acc, v) in t.iter_mut().zip(&r.probes) {
                *acc += v;
            }
        }
        t
    }
}

pub struct RunOutcome {
    pub record: RunRecord,
    /// The inference network and its parameters, auxiliary parts stripped.
    pub model: MtlModel,
    pub params: ParamSet<f32>,
    /// Metrics of the last evaluation; `None` when the run diverged.
    pub final_metrics: Option<Metrics>,
    pub diverged: bool,
    pub iters_done: usize,
}

/// Builds the modules and initial parameters of a run, loading the donor's
/// shared layers when the strategy has one. Returns the effective `lr0`.
pub fn init_run(
    strategy: &Strategy,
    cfg: &ModelConfig,
    train: &TrainConfig,
    opts: &RunOptions,
) -> Result<(TrainModules, ParamSet<f32>, f64)> {
    let mut ps = ParamSet::new();
    let mut rng = Pcg64::seed_from_u64(train.seed);
    let modules = build_modules(strategy, cfg, opts.agg, &mut ps, &mut rng)?;
    let mut lr0 = train.lr0;
    if let Some(d) = strategy.donor_task(cfg.tasks.len()) {
        let donor = opts.donor.ok_or_else(|| {
            Error::Config(format!("{strategy} needs the single-t{} checkpoint", d + 1))
        })?;
        transfer_params(&mut ps, donor, |t| t == ParamTag::Shared)?;
    }
    if strategy.reduced_lr() {
        lr0 /= LR_DIVISOR;
    }
    Ok((modules, ps, lr0))
}

fn loss_columns(m: &TrainModules) -> Vec<String> {
    let cfg = &m.model.cfg;
    let mut cols: Vec<String> = cfg.tasks.iter().map(|t| format!("loss_{}", t.kind.short())).collect();
    if let Some(a) = &m.aux {
        cols.extend(a.tasks().iter().map(|&t| format!("loss_aux_{}", cfg.tasks[t].kind.short())));
    }
    if let Some(d) = &m.ds {
        cols.push(format!("loss_ds_{}", cfg.tasks[d.task].kind.short()));
    }
    cols
}

/// Endless shuffled pass over a split, reshuffled every epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn next(&mut self, rng: &mut Pcg32) -> usize {
        if self.pos == 0 {
            self.order.shuffle(rng);
        }
        let i = self.order[self.pos];
        self.pos = (self.pos + 1) % self.order.len();
        i
    }
}

/// Maps a numeric failure to `None`; other errors pass through.
fn finite<R>(r: Result<R>) -> Result<Option<R>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NumericFailure { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains `strategy` on `opts.train_split` and evaluates the main heads on
/// `opts.eval_split`. Divergence stops the run and is reported in the
/// outcome rather than as an error.
pub fn run_strategy(
    strategy: &Strategy,
    data: &Dataset,
    cfg: &ModelConfig,
    train: &TrainConfig,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    if train.batch == 0 || train.eval_batch == 0 || train.eval_every == 0 {
        return Err(Error::Config("batch, eval_batch and eval_every must be positive".into()));
    }
    let split = data.split(opts.train_split)?;
    if split.is_empty() {
        return Err(Error::Data(format!("split `{}` is empty", opts.train_split)));
    }
    let (modules, mut ps, lr0) = init_run(strategy, cfg, train, opts)?;
    let probe = GradProbe::new(&ps, &train.probe_layers, train.probe_samples, train.seed)?;
    let mut record = RunRecord {
        loss_columns: loss_columns(&modules),
        probe_columns: probe.paths().map(|p| format!("probe_{p}")).collect(),
        ..Default::default()
    };
    let mut sgd = Sgd::new(train.momentum, train.wd);
    let mut rng = Pcg32::new(train.seed, 0xda7a);
    let mut sampler = Sampler {
        order: split.to_vec(),
        pos: 0,
    };
    let mut diverged = false;
    let mut done = 0;
    for iter in 0..train.iters {
        let lr = poly_lr(iter, train.iters, lr0);
        let samples: Vec<Sample> = (0..train.batch)
            .map(|_| {
                let s = &data.samples[sampler.next(&mut rng)];
                if train.augment.enabled {
                    augment(s, &mut rng, &train.augment)
                } else {
                    s.clone()
                }
            })
            .collect();
        let batch = Batch::<f32>::from_samples(&samples.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new(true);
        let Some(obj) = finite(joint_objective(&mut g, &ps, &modules, &batch, strategy))? else {
            diverged = true;
            break;
        };
        let scalar = |v| g.value(v).item().as_f64();
        let loss_total = scalar(obj.total);
        let mut losses: Vec<f64> = obj.main.iter().map(|&v| scalar(v)).collect();
        losses.extend(obj.aux.iter().map(|&(_, v)| scalar(v)));
        losses.extend(obj.ds.map(scalar));
        if !loss_total.is_finite() {
            diverged = true;
            break;
        }
        ps.zero_grad();
        if finite(g.backward(obj.total, &mut ps))?.is_none() {
            diverged = true;
            break;
        }
        let probes = probe.probe(&ps)?;
        sgd.step(&mut ps, lr, |_| true)?;
        ps.apply_bn_stats(&g.take_bn_stats(), f32::lit(BN_MOMENTUM))?;
        record.rows.push(IterRow {
            iter,
            lr,
            loss_total,
            losses,
            probes,
        });
        done = iter + 1;
        if done % train.eval_every == 0 && done < train.iters {
            let Some(metrics) = finite(evaluate(&modules.model, &ps, data, opts.eval_split, train.eval_batch))? else {
                diverged = true;
                break;
            };
            record.evals.push(EvalRow { iter: done, metrics });
        }
    }
    let (model, params) = strip_aux(&modules.model, &ps);
    let final_metrics = if diverged || params.iter().any(|(_, p)| !p.value.is_finite()) {
        None
    } else {
        finite(evaluate(&model, &params, data, opts.eval_split, train.eval_batch))?
    };
    match final_metrics {
        Some(metrics) => record.evals.push(EvalRow { iter: done, metrics }),
        None => diverged = true,
    }
    Ok(RunOutcome {
        record,
        model,
        params,
        final_metrics,
        diverged,
        iters_done: done,
    })
}

/// Metrics of the main heads over a split, in inference mode.
pub fn evaluate<T: Real>(model: &MtlModel, ps: &ParamSet<T>, data: &Dataset, split: &str, batch: usize) -> Result<Metrics> {
    let idx = data.split(split)?;
    let tasks = &model.cfg.tasks;
    let mut seg_pred = Vec::new();
    let mut seg_gt = Vec::new();
    let mut dep = (Vec::new(), Vec::new());
    let mut nrm = (Vec::new(), Vec::new());
    for chunk in idx.chunks(batch.max(1)) {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let b = Batch::<T>::from_samples(&samples)?;
        let mut g = Graph::new(false);
        let x = g.constant(b.image.clone());
        let out = model.forward_main(&mut g, ps, x)?;
        for (t, &p) in out.preds.iter().enumerate() {
            let v = g.value(p).data();
            let (n, _, h, w) = g.value(p).dims4()?;
            match tasks[t].kind {
                TaskKind::Segmentation => {
                    seg_pred.extend(argmax_classes(v, n, tasks[t].classes, h * w));
                    seg_gt.extend_from_slice(&b.seg);
                }
                TaskKind::Depth => {
                    dep.0.extend_from_slice(v);
                    dep.1.extend_from_slice(b.depth.data());
                }
                TaskKind::Normal => {
                    nrm.0.extend_from_slice(v);
                    nrm.1.extend_from_slice(b.normal.data());
                }
            }
        }
    }
    let mut m = Metrics::default();
    let plane = model.cfg.input_hw.0 * model.cfg.input_hw.1;
    for task in tasks {
        match task.kind {
            TaskKind::Segmentation => {
                m.miou = Some(metric_miou(&seg_pred, &seg_gt, task.classes));
                m.pixacc = Some(metric_pixel_acc(&seg_pred, &seg_gt, task.classes));
            }
            TaskKind::Depth => {
                m.rel = Some(metric_rel(&dep.0, &dep.1));
                m.rms = Some(metric_rms(&dep.0, &dep.1));
            }
            TaskKind::Normal => m.angle = Some(metric_mean_angle(&nrm.0, &nrm.1, plane)),
        }
    }
    Ok(m)
}
