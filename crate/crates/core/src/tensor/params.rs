use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Ownership group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "group", content = "task", rename_all = "lowercase")]
pub enum ParamTag {
    /// Shared encoder layers.
    Shared,
    /// Decoder of the task at this position of the model's task list.
    Task(usize),
    /// Train-time-only modules supervised by the task (auxiliary and
    /// deep-supervision heads).
    Aux(usize),
    /// Learnable loss weighting of the task.
    Weighting(usize),
    Controller,
}

impl ParamTag {
    /// Whether the parameter survives stripping down to the inference network.
    pub fn is_main(self) -> bool {
        matches!(self, ParamTag::Shared | ParamTag::Task(_))
    }
}

impl fmt::Display for ParamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamTag::Shared => write!(f, "shared"),
            ParamTag::Task(t) => write!(f, "task({t})"),
            ParamTag::Aux(t) => write!(f, "aux({t})"),
            ParamTag::Weighting(t) => write!(f, "weighting({t})"),
            ParamTag::Controller => write!(f, "controller"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Trained by the optimizer.
    Weight,
    /// Running statistics; updated outside the gradient path.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub tag: ParamTag,
    pub kind: ParamKind,
}

/// Named parameters, iterated in path order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        path: impl Into<String>,
        value: Tensor<T>,
        tag: ParamTag,
        kind: ParamKind,
    ) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Contract(format!("duplicate parameter path `{path}`")));
        }
        let grad = vec![T::zero(); value.numel()];
        self.entries.insert(
            path,
            Param {
                value,
                grad,
                tag,
                kind,
            },
        );
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Param<T>> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{path}`")))
    }

    pub fn value(&self, path: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(path)?.value)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Scalar count of trainable weights whose tag satisfies `pred`.
    pub fn count_weights(&self, pred: impl Fn(ParamTag) -> bool) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Weight && pred(p.tag))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Keeps only entries whose tag satisfies `pred`.
    pub fn filtered(&self, pred: impl Fn(ParamTag) -> bool) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| pred(p.tag))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Moves every entry of `other` into `self`; paths must not collide.
    pub fn merge(&mut self, other: ParamSet<T>) -> Result<()> {
        for (path, p) in other.entries {
            if self.entries.contains_key(&path) {
                return Err(Error::Contract(format!("duplicate parameter path `{path}`")));
            }
            self.entries.insert(path, p);
        }
        Ok(())
    }

    pub fn remove(&mut self, path: &str) -> Option<Param<T>> {
        self.entries.remove(path)
    }

    /// Exponential moving average update of batch-norm running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[super::BnStats<T>], momentum: T) -> Result<()> {
        for s in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let path = format!("{}.{suffix}", s.path);
                let buf = self.get_mut(&path)?;
                for (r, &b) in buf.value.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - momentum) * *r + momentum * b;
                }
            }
        }
        Ok(())
    }
}
