use crate::data::IGNORE;
use crate::error::{Error, Result};
use crate::tensor::{dims4, Graph, Real, Tensor, Var};

/// Mean cross-entropy over pixels whose label is not [`IGNORE`]. A batch
/// with no labelled pixel gives 0 with zero gradients.
pub fn loss_segmentation<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[u8], classes: usize) -> Result<Var> {
    let (n, k, h, w) = dims4(g.shape(logits))?;
    if k != classes || labels.len() != n * h * w {
        return Err(Error::dim(
            "loss_segmentation",
            format!("logits {:?} with {} labels for {classes} classes", g.shape(logits), labels.len()),
        ));
    }
    let plane = h * w;
    let mut idx = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= k {
            return Err(Error::Data(format!("segmentation label {l} with {k} classes")));
        }
        let (ni, px) = (i / plane, i % plane);
        idx.push((ni * k + l as usize) * plane + px);
    }
    if idx.is_empty() {
        let s = g.sum_all(logits)?;
        return g.scale(s, T::zero());
    }
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.pick(logp, &idx)?;
    let s = g.sum_all(picked)?;
    g.scale(s, T::lit(-1.0 / idx.len() as f64))
}

/// Mean absolute error against strictly positive ground truth.
pub fn loss_depth<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    if g.shape(pred) != gt.shape() {
        return Err(Error::dim("loss_depth", format!("{:?} vs {:?}", g.shape(pred), gt.shape())));
    }
    if let Some(bad) = gt.data().iter().find(|d| !(**d > T::zero())) {
        return Err(Error::Data(format!("non-positive ground-truth depth {bad}")));
    }
    let target = g.constant(gt.clone());
    let diff = g.sub(pred, target)?;
    let a = g.abs(diff)?;
    g.mean_all(a)
}

/// Mean `1 - <pred, gt>` over pixels; both are `N x 3 x H x W`.
pub fn loss_normal<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    let (n, c, h, w) = dims4(g.shape(pred))?;
    if c != 3 || g.shape(pred) != gt.shape() {
        return Err(Error::dim("loss_normal", format!("{:?} vs {:?}", g.shape(pred), gt.shape())));
    }
    let target = g.constant(gt.clone());
    let prod = g.mul(pred, target)?;
    let s = g.sum_all(prod)?;
    let mean_cos = g.scale(s, T::lit(-1.0 / (n * h * w) as f64))?;
    g.add_scalar(mean_cos, T::one())
}
