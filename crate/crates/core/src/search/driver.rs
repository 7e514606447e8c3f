use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codec::{decode_tokens_with, op_counts, op_names};
use super::controller::Controller;
use super::ppo::{ppo_update, Baseline, PpoConfig, Trajectory};
use super::reward::compute_reward;
use crate::auxiliary::{build_from_genotype, Genotype, LocationRule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mtl_net::ModelConfig;
use crate::tensor::ParamSet;
use crate::train::{run_strategy, Adam, Metrics, RunOptions, Strategy, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Total number of candidates evaluated.
    pub candidates: usize,
    /// Candidates per controller update.
    pub batch: usize,
    pub ppo: PpoConfig,
    /// Training iterations per candidate.
    pub short_iters: usize,
    pub seed: u64,
    /// Restrict cells to reading cells of strictly earlier tasks.
    pub cross_task_only: bool,
    /// Record real evaluation times (makes logs machine-dependent).
    pub record_wall_time: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            candidates: 200,
            batch: 16,
            ppo: PpoConfig::default(),
            short_iters: 200,
            seed: 0,
            cross_task_only: false,
            record_wall_time: false,
        }
    }
}

impl SearchConfig {
    pub fn rule(&self) -> LocationRule {
        LocationRule {
            cross_task_only: self.cross_task_only,
        }
    }
}

/// Evaluation parallelism from `AUXNAS_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("AUXNAS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Training seed of candidate `id`.
pub fn candidate_seed(search_seed: u64, id: usize) -> u64 {
    search_seed.wrapping_add((id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// What a candidate is trained and scored on.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub data: &'a Dataset,
    pub model: &'a ModelConfig,
    /// Optimizer and augmentation settings; iterations come from `short_iters`.
    pub train: &'a TrainConfig,
    pub short_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardRecord {
    pub candidate_id: usize,
    pub seed: u64,
    pub genotype: Option<Genotype>,
    pub metrics: Metrics,
    pub reward: f64,
    pub diverged: bool,
    /// Training iterations actually run.
    pub budget_used: usize,
    pub wall_ms: u64,
}

#[derive(Serialize)]
struct LogLine<'a> {
    candidate_id: usize,
    seed: u64,
    genotype: Option<&'a Genotype>,
    metrics: BTreeMap<&'a str, f64>,
    reward: f64,
    diverged: bool,
    wall_ms: u64,
}

impl RewardRecord {
    pub fn to_json_line(&self) -> String {
        let metrics = Metrics::IDS
            .iter()
            .filter_map(|&id| self.metrics.get(id).map(|v| (id, v)))
            .collect();
        serde_json::to_string(&LogLine {
            candidate_id: self.candidate_id,
            seed: self.seed,
            genotype: self.genotype.as_ref(),
            metrics,
            reward: self.reward,
            diverged: self.diverged,
            wall_ms: self.wall_ms,
        })
        .expect("log line serializes")
    }
}

/// Trains the main network with the candidate's auxiliary modules on
/// `meta_train` and scores the main heads on `meta_val`. Genotypes that
/// cannot be built score 0 without training.
pub fn evaluate_candidate(g: &Genotype, ctx: &EvalContext, id: usize, seed: u64) -> Result<RewardRecord> {
    let mut rec = RewardRecord {
        candidate_id: id,
        seed,
        genotype: Some(g.clone()),
        metrics: Metrics::default(),
        reward: 0.0,
        diverged: false,
        budget_used: 0,
        wall_ms: 0,
    };
    let mut scratch = ParamSet::<f32>::new();
    match build_from_genotype(g, ctx.model, LocationRule::default(), &mut scratch, &mut Pcg64::seed_from_u64(0)) {
        Ok(_) => {}
        Err(Error::GenotypeInvalid(_)) => return Ok(rec),
        Err(e) => return Err(e),
    }
    let train = TrainConfig {
        iters: ctx.short_iters,
        eval_every: ctx.short_iters.max(1),
        seed,
        probe_layers: Vec::new(),
        ..ctx.train.clone()
    };
    let opts = RunOptions {
        train_split: "meta_train",
        eval_split: "meta_val",
        ..Default::default()
    };
    let out = run_strategy(&Strategy::AuxiNas(g.clone()), ctx.data, ctx.model, &train, &opts)?;
    rec.budget_used = out.iters_done;
    let Some(m) = out.final_metrics else {
        rec.diverged = true;
        return Ok(rec);
    };
    rec.metrics = m;
    let primary: Vec<(&str, f64)> = ctx
        .model
        .tasks
        .iter()
        .map(|t| {
            let id = t.kind.metric_ids()[0];
            (id, m.get(id).unwrap_or(f64::NAN))
        })
        .collect();
    let (reward, diverged) = compute_reward(&primary)?;
    rec.reward = reward;
    rec.diverged = diverged;
    Ok(rec)
}

/// Operator frequencies among the genotypes sampled for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct OpStats {
    pub update: usize,
    pub adaptors: [usize; 6],
    pub aggregators: [usize; 2],
}

pub fn opstats_csv(rows: &[OpStats]) -> String {
    let mut s = String::from("update");
    for n in op_names() {
        write!(s, ",{n}").unwrap();
    }
    s.push('\n');
    for r in rows {
        let ad_total = r.adaptors.iter().sum::<usize>().max(1) as f64;
        let ag_total = r.aggregators.iter().sum::<usize>().max(1) as f64;
        write!(s, "{}", r.update).unwrap();
        for &c in &r.adaptors {
            write!(s, ",{}", c as f64 / ad_total).unwrap();
        }
        for &c in &r.aggregators {
            write!(s, ",{}", c as f64 / ag_total).unwrap();
        }
        s.push('\n');
    }
    s
}

pub struct SearchOutcome {
    pub log: Vec<RewardRecord>,
    pub best: Option<(Genotype, f64)>,
    pub opstats: Vec<OpStats>,
}

/// Repeatedly samples a batch of genotypes, evaluates them (up to `threads`
/// at a time) and updates the controller with PPO. `on_record` sees every
/// record in candidate order.
pub fn search_loop(
    cfg: &SearchConfig,
    ctx: &EvalContext,
    threads: usize,
    mut on_record: impl FnMut(&RewardRecord) -> Result<()>,
) -> Result<SearchOutcome> {
    if cfg.batch == 0 {
        return Err(Error::Config("search batch must be positive".into()));
    }
    let (p, t) = (ctx.model.taps(), ctx.model.tasks.len());
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let mut ps = ParamSet::new();
    let ctrl = Controller::new(p, t, cfg.rule(), &mut ps, &mut rng)?;
    let mut adam = Adam::new(cfg.ppo.lr);
    let mut baseline = Baseline::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut out = SearchOutcome {
        log: Vec::with_capacity(cfg.candidates),
        best: None,
        opstats: Vec::new(),
    };
    while out.log.len() < cfg.candidates {
        let b = cfg.batch.min(cfg.candidates - out.log.len());
        let first = out.log.len();
        let samples = ctrl.sample(&ps, &mut rng, b)?;
        let genos = samples
            .iter()
            .map(|s| decode_tokens_with(&s.tokens, p, t, cfg.rule()))
            .collect::<Result<Vec<_>>>()?;
        let eval = |(i, g): (usize, &Genotype)| -> Result<RewardRecord> {
            let id = first + i;
            let start = Instant::now();
            let mut r = evaluate_candidate(g, ctx, id, candidate_seed(cfg.seed, id))?;
            if cfg.record_wall_time {
                r.wall_ms = start.elapsed().as_millis() as u64;
            }
            Ok(r)
        };
        let records: Vec<RewardRecord> = if threads <= 1 {
            genos.iter().enumerate().map(eval).collect::<Result<_>>()?
        } else {
            pool.install(|| genos.par_iter().enumerate().map(eval).collect::<Result<_>>())?
        };
        let (adaptors, aggregators) = op_counts(&genos);
        out.opstats.push(OpStats {
            update: out.opstats.len(),
            adaptors,
            aggregators,
        });
        for r in &records {
            on_record(r)?;
            let better = match &out.best {
                None => true,
                Some((_, best)) => r.reward > *best,
            };
            if better {
                out.best = r.genotype.clone().map(|g| (g, r.reward));
            }
        }
        let batch: Vec<Trajectory> = samples
            .into_iter()
            .zip(&records)
            .map(|(s, r)| Trajectory {
                tokens: s.tokens,
                logps: s.logps,
                reward: r.reward,
            })
            .collect();
        ppo_update(&ctrl, &mut ps, &mut adam, &batch, &mut baseline, &cfg.ppo)?;
        out.log.extend(records);
    }
    Ok(out)
}
