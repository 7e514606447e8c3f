//! Dense-prediction metrics. Pixels labelled [`IGNORE`], non-positive
//! ground-truth depths and zero ground-truth normals are excluded.

use serde::{Deserialize, Serialize};

use crate::data::IGNORE;
use crate::tensor::Real;

/// Final metric values; absent for tasks the model does not predict.
/// `rel` is a fraction, `angle` is in degrees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: Option<f64>,
    pub pixacc: Option<f64>,
    pub rel: Option<f64>,
    pub rms: Option<f64>,
    pub angle: Option<f64>,
}

impl Metrics {
    pub const IDS: [&'static str; 5] = ["miou", "pixacc", "rel", "rms", "angle"];

    pub fn get(&self, id: &str) -> Option<f64> {
        match id {
            "miou" => self.miou,
            "pixacc" => self.pixacc,
            "rel" => self.rel,
            "rms" => self.rms,
            "angle" => self.angle,
            _ => None,
        }
    }

    pub fn values(&self) -> [Option<f64>; 5] {
        [self.miou, self.pixacc, self.rel, self.rms, self.angle]
    }
}

/// `k x k` confusion counts indexed `[gt][pred]`.
pub fn confusion(pred: &[usize], gt: &[u8], k: usize) -> Vec<u64> {
    assert_eq!(pred.len(), gt.len());
    let mut m = vec![0u64; k * k];
    for (&p, &t) in pred.iter().zip(gt) {
        if t != IGNORE && (t as usize) < k && p < k {
            m[t as usize * k + p] += 1;
        }
    }
    m
}

/// Mean IoU over classes occurring in the ground truth or the prediction.
pub fn metric_miou(pred: &[usize], gt: &[u8], k: usize) -> f64 {
    let m = confusion(pred, gt, k);
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..k {
        let tp = m[c * k + c];
        let row: u64 = m[c * k..(c + 1) * k].iter().sum();
        let col: u64 = (0..k).map(|r| m[r * k + c]).sum();
        let union = row + col - tp;
        if union > 0 {
            sum += tp as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

pub fn metric_pixel_acc(pred: &[usize], gt: &[u8], k: usize) -> f64 {
    let m = confusion(pred, gt, k);
    let total: u64 = m.iter().sum();
    let correct: u64 = (0..k).map(|c| m[c * k + c]).sum();
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn depth_pairs<'a, T: Real>(pred: &'a [T], gt: &'a [T]) -> impl Iterator<Item = (f64, f64)> + 'a {
    assert_eq!(pred.len(), gt.len());
    pred.iter()
        .zip(gt)
        .map(|(p, d)| (p.as_f64(), d.as_f64()))
        .filter(|&(_, d)| d > 0.0 && d.is_finite())
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean `|pred - gt| / gt`.
pub fn metric_rel<T: Real>(pred: &[T], gt: &[T]) -> f64 {
    mean(depth_pairs(pred, gt).map(|(p, d)| (p - d).abs() / d))
}

pub fn metric_rms<T: Real>(pred: &[T], gt: &[T]) -> f64 {
    mean(depth_pairs(pred, gt).map(|(p, d)| (p - d) * (p - d))).sqrt()
}

/// Mean angle in degrees between normals stored channel-major
/// (`3 x pixels`, per image) in `pred` and `gt`; `plane` is `H * W`.
pub fn metric_mean_angle<T: Real>(pred: &[T], gt: &[T], plane: usize) -> f64 {
    assert_eq!(pred.len(), gt.len());
    assert_eq!(pred.len() % (3 * plane), 0);
    let mut angles = Vec::with_capacity(pred.len() / 3);
    for img in 0..pred.len() / (3 * plane) {
        let base = img * 3 * plane;
        for i in 0..plane {
            let at = |v: &[T], c: usize| v[base + c * plane + i].as_f64();
            let n = [at(gt, 0), at(gt, 1), at(gt, 2)];
            if n.iter().all(|&c| c == 0.0) {
                continue;
            }
            let dot: f64 = (0..3).map(|c| at(pred, c) * n[c]).sum();
            angles.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    mean(angles.into_iter())
}

/// Arg-max over the class axis of `N x K x H x W` logits; ties go to the
/// lowest class.
pub fn argmax_classes<T: Real>(logits: &[T], n: usize, k: usize, plane: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * plane);
    for ni in 0..n {
        for i in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if logits[(ni * k + c) * plane + i] > logits[(ni * k + best) * plane + i] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}
