use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamKind, ParamSet, ParamTag, Real};

/// `lr0 * (1 - iter / max_iter)^0.9`; 0 from `max_iter` on.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64) -> f64 {
    if iter >= max_iter {
        return if max_iter == 0 { lr0 } else { 0.0 };
    }
    lr0 * (1.0 - iter as f64 / max_iter as f64).powf(0.9)
}

fn check_grad<T: Real>(path: &str, value_len: usize, grad_len: usize) -> Result<()> {
    if value_len != grad_len {
        return Err(Error::Contract(format!(
            "gradient of `{path}` has {grad_len} entries for {value_len} values"
        )));
    }
    Ok(())
}

/// SGD with momentum and L2 weight decay:
/// `v <- m v + g + wd theta`, `theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every weight whose tag passes `select`.
    pub fn step(&mut self, ps: &mut ParamSet<T>, lr: f64, select: impl Fn(ParamTag) -> bool) -> Result<()> {
        let (m, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for (path, p) in ps.iter_mut() {
            if p.kind != ParamKind::Weight || !select(p.tag) {
                continue;
            }
            check_grad::<T>(path, p.value.numel(), p.grad.len())?;
            let v = self
                .velocity
                .entry(path.to_string())
                .or_insert_with(|| vec![T::zero(); p.grad.len()]);
            for ((theta, &g), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *v = m * *v + g + wd * *theta;
                *theta -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet<f64>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (path, p) in ps.iter_mut() {
            if p.kind != ParamKind::Weight {
                continue;
            }
            check_grad::<f64>(path, p.value.numel(), p.grad.len())?;
            let (m, v) = self
                .moments
                .entry(path.to_string())
                .or_insert_with(|| (vec![0.0; p.grad.len()], vec![0.0; p.grad.len()]));
            for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *theta -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
