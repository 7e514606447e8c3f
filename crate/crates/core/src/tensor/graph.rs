use std::collections::HashMap;

use super::ops::{self, Conv2dSpec, ReduceOp};
use super::{ParamKind, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub path: String,
    pub mean: Vec<T>,
    /// Unbiased variance, as folded into the running estimate.
    pub var: Vec<T>,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Softplus(Var),
    Scale(Var, T),
    Shift(Var),
    Clamp(Var, T, T),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Pad {
        x: Var,
        pad: usize,
    },
    Resize {
        x: Var,
        align_corners: bool,
    },
    GridSample {
        x: Var,
        points: Var,
    },
    DeformPoints {
        offsets: Var,
        k: usize,
    },
    Reduce {
        x: Var,
        op: ReduceOp,
        count: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    grad: Option<Vec<T>>,
    param: Option<String>,
}

/// Recording of one forward pass (the tape).
///
/// Nodes are appended in execution order, so every op's inputs precede it and
/// [`Graph::backward`] is a single reverse sweep. A graph belongs to one
/// execution context; it is `Send` but deliberately not shared.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    training: bool,
    params: HashMap<String, Var>,
    bn_stats: Vec<BnStats<T>>,
    scope: Vec<String>,
}

impl<T: Real> Graph<T> {
    /// `training` selects batch statistics in batch norm.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            params: HashMap::new(),
            bn_stats: Vec::new(),
            scope: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn scope_path(&self) -> String {
        self.scope.join(".")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true, None)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false, None)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Pulls a named parameter into the graph; repeated calls reuse the node.
    pub fn param(&mut self, ps: &ParamSet<T>, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let p = ps.get(path)?;
        let trainable = p.kind == ParamKind::Weight;
        let v = self.leaf(p.value.clone(), trainable, Some(path.to_string()));
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    /// Batch statistics recorded by training-mode batch norms so far.
    pub fn take_bn_stats(&mut self) -> Vec<BnStats<T>> {
        std::mem::take(&mut self.bn_stats)
    }

    pub(crate) fn record_bn_stats(&mut self, stats: BnStats<T>) {
        self.bn_stats.push(stats);
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFailure {
                op: name,
                path: self.scope_path(),
            });
        }
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from the scalar `loss`; parameter gradients are added
    /// (`+=`) into `ps`, so successive calls accumulate.
    pub fn backward(&mut self, loss: Var, ps: &mut ParamSet<T>) -> Result<()> {
        self.backward_nodes(loss)?;
        for node in &self.nodes {
            if let (Some(path), Some(g)) = (&node.param, &node.grad) {
                let p = ps.get_mut(path)?;
                for (dst, &src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Reverse sweep that only fills node gradients (see [`Graph::grad`]).
    pub fn backward_nodes(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(gout);
                continue;
            }
            let contributions = ops::backward_op(self, i, &gout)?;
            self.nodes[i].grad = Some(gout);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Exp(x)
        | Op::Abs(x)
        | Op::Softplus(x)
        | Op::Scale(x, _)
        | Op::Shift(x)
        | Op::Clamp(x, _, _)
        | Op::Reshape(x)
        | Op::Narrow { x, .. }
        | Op::Pad { x, .. }
        | Op::Resize { x, .. }
        | Op::Reduce { x, .. }
        | Op::LogSoftmax { x, .. }
        | Op::Pick { x, .. }
        | Op::L2Normalize { x, .. } => vec![*x],
        Op::DeformPoints { offsets, .. } => vec![*offsets],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Minimum(a, b) => vec![*a, *b],
        Op::GridSample { x, points } => vec![*x, *points],
        Op::Concat(xs) => xs.clone(),
    }
}
