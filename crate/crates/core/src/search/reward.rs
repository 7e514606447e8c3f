use crate::error::{Error, Result};

/// Score in `[0, 1]` of one metric: accuracy-like metrics pass through,
/// errors `e` map to `1 / (1 + e)` with angles first divided by 180.
pub fn metric_score(id: &str, value: f64) -> Result<f64> {
    match id {
        "miou" | "pixacc" => Ok(value),
        "rel" | "rms" => Ok(1.0 / (1.0 + value)),
        "angle" => Ok(1.0 / (1.0 + value / 180.0)),
        _ => Err(Error::Contract(format!("unknown metric `{id}`"))),
    }
}

/// Geometric mean of the metric scores. Returns `(reward, diverged)`; any
/// NaN metric gives `(0, true)`.
pub fn compute_reward(metrics: &[(&str, f64)]) -> Result<(f64, bool)> {
    if metrics.is_empty() {
        return Err(Error::Contract("reward of no metrics".into()));
    }
    if metrics.iter().any(|(_, v)| v.is_nan()) {
        return Ok((0.0, true));
    }
    let mut prod = 1.0;
    for &(id, v) in metrics {
        prod *= metric_score(id, v)?.clamp(0.0, 1.0);
    }
    Ok((prod.powf(1.0 / metrics.len() as f64), false))
}
