use serde::{Deserialize, Serialize};

use super::controller::Controller;
use crate::error::{Error, Result};
use crate::train::Adam;
use crate::tensor::{Graph, ParamSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub baseline_decay: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 4,
            lr: 1e-3,
            entropy_coef: 0.01,
            baseline_decay: 0.95,
        }
    }
}

/// Exponential moving average of rewards; starts at the first batch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Baseline {
    pub value: Option<f64>,
}

impl Baseline {
    pub fn update(&mut self, rewards: &[f64], decay: f64) {
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        self.value = Some(match self.value {
            Some(b) => decay * b + (1.0 - decay) * mean,
            None => mean,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    /// Log-probabilities under the policy that sampled the tokens.
    pub logps: Vec<f64>,
    pub reward: f64,
}

/// `reward - baseline`, with an unset baseline taken as the batch mean.
pub fn advantages(batch: &[Trajectory], baseline: &Baseline) -> Vec<f64> {
    let b = baseline
        .value
        .unwrap_or_else(|| batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64);
    batch.iter().map(|t| t.reward - b).collect()
}

/// Clipped surrogate `-mean(min(r A, clip(r) A)) - c_ent * entropy`, with
/// means over all tokens of the batch.
pub fn surrogate(
    g: &mut Graph<f64>,
    ctrl: &Controller,
    ps: &ParamSet<f64>,
    batch: &[Trajectory],
    adv: &[f64],
    cfg: &PpoConfig,
) -> Result<Var> {
    let (b, l) = (batch.len(), ctrl.seq_len());
    if batch.iter().any(|t| t.tokens.len() != l || t.logps.len() != l) {
        return Err(Error::Contract(format!("trajectories must have {l} tokens")));
    }
    let r = ctrl.rollout(g, ps, b, l, |pos, _| Ok(batch.iter().map(|t| t.tokens[pos]).collect()))?;
    let old = g.constant(Tensor::from_fn([b, l], |i| batch[i / l].logps[i % l]));
    let a = g.constant(Tensor::from_fn([b, l], |i| adv[i / l]));
    let diff = g.sub(r.logp, old)?;
    let ratio = g.exp(diff)?;
    let unclipped = g.mul(ratio, a)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let clipped = g.mul(clipped, a)?;
    let m = g.minimum(unclipped, clipped)?;
    let s = g.sum_all(m)?;
    let policy = g.scale(s, -1.0 / (b * l) as f64)?;
    let e = g.sum_all(r.entropy)?;
    let bonus = g.scale(e, -cfg.entropy_coef / (b * l) as f64)?;
    g.add(policy, bonus)
}

/// `K` Adam steps on the clipped surrogate of one batch, then the baseline
/// update. Returns the surrogate value before each step.
pub fn ppo_update(
    ctrl: &Controller,
    ps: &mut ParamSet<f64>,
    adam: &mut Adam,
    batch: &[Trajectory],
    baseline: &mut Baseline,
    cfg: &PpoConfig,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Contract("PPO update on an empty batch".into()));
    }
    let adv = advantages(batch, baseline);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new(true);
        let loss = surrogate(&mut g, ctrl, ps, batch, &adv, cfg)?;
        losses.push(g.value(loss).item());
        ps.zero_grad();
        g.backward(loss, ps)?;
        adam.step(ps)?;
    }
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    baseline.update(&rewards, cfg.baseline_decay);
    Ok(losses)
}
