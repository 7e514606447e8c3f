//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward closure, so it is independent
//! of every backward rule it validates.

use super::{Graph, ParamKind, ParamSet, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Max over checked tensors of `max|analytic - numeric| / max(|analytic|, |numeric|)`
    /// (infinity norms, floored at 1e-12).
    pub max_rel_err: f64,
    /// Tensor with the largest relative error.
    pub worst: String,
    pub checked: usize,
    /// Tensors whose analytic and numeric gradients both stay below
    /// [`ZERO_GRAD`]; their ratio is pure rounding noise and is left out of
    /// `max_rel_err`.
    pub zero: Vec<String>,
}

/// Below this magnitude a central difference with a step around 1e-6 cannot
/// be told apart from zero.
pub const ZERO_GRAD: f64 = 1e-8;

/// Compares backprop gradients of the scalar built by `f` against central
/// differences with step `h`, for every weight in `ps` whose path satisfies
/// `select`.
pub fn check<F>(ps: &ParamSet<f64>, training: bool, h: f64, select: impl Fn(&str) -> bool, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new(training);
    let loss = f(&mut g, ps)?;
    let mut with_grads = ps.clone();
    with_grads.zero_grad();
    g.backward(loss, &mut with_grads)?;

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new(training);
        let l = f(&mut g, p)?;
        Ok(g.value(l).item())
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        zero: Vec::new(),
    };
    let paths: Vec<String> = ps
        .iter()
        .filter(|(path, p)| p.kind == ParamKind::Weight && select(path))
        .map(|(path, _)| path.to_string())
        .collect();
    let mut probe = ps.clone();
    for path in paths {
        let analytic = with_grads.get(&path)?.grad.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = probe.get(&path)?.value.data()[i];
            probe.get_mut(&path)?.value.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&path)?.value.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&path)?.value.data_mut()[i] = orig;
            *num = (up - down) / (2.0 * h);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(1e-12, f64::max);
        if scale < ZERO_GRAD {
            report.zero.push(path.clone());
            report.checked += 1;
            continue;
        }
        let rel = diff / scale;
        if rel > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = rel;
            report.worst = path.clone();
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so every output
/// element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).numel();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let weights: Vec<f64> = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    let w = g.constant(super::Tensor::new(g.shape(y).to_vec(), weights)?);
    let prod = g.mul(y, w)?;
    g.sum_all(prod)
}
