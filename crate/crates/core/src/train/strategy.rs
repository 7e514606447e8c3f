use std::fmt;

use crate::auxiliary::Genotype;
use crate::error::{Error, Result};

/// Training strategies. Task indices are positions in the model's task list
/// (0-based; the command line counts from 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    Single(usize),
    Joint,
    /// Joint training initialized from the `Single` model of the task.
    Prior(usize),
    DeepSupervision(usize),
    Kendall,
    /// Basic auxiliary module for the task, initialized from the `Single`
    /// model of another task.
    AuxiSingle(usize),
    AuxiBoth,
    AuxiNas(Genotype),
}

impl Strategy {
    /// Parses a command-line name; `auxi-nas` takes its genotype from `genotype`.
    pub fn parse(name: &str, genotype: Option<Genotype>) -> Result<Self> {
        let task = |s: &str| -> Result<usize> {
            s.strip_prefix('t')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(|n| n - 1)
                .ok_or_else(|| Error::Config(format!("bad task suffix in strategy `{name}`")))
        };
        Ok(match name {
            "joint" => Strategy::Joint,
            "kendall" => Strategy::Kendall,
            "auxi-both" => Strategy::AuxiBoth,
            "auxi-nas" => Strategy::AuxiNas(
                genotype.ok_or_else(|| Error::Config("auxi-nas needs a genotype".into()))?,
            ),
            _ => match name.rsplit_once('-') {
                Some(("single", t)) => Strategy::Single(task(t)?),
                Some(("prior", t)) => Strategy::Prior(task(t)?),
                Some(("ds", t)) => Strategy::DeepSupervision(task(t)?),
                Some(("auxi", t)) => Strategy::AuxiSingle(task(t)?),
                _ => return Err(Error::Config(format!("unknown strategy `{name}`"))),
            },
        })
    }

    pub fn name(&self) -> String {
        match self {
            Strategy::Single(t) => format!("single-t{}", t + 1),
            Strategy::Joint => "joint".into(),
            Strategy::Prior(t) => format!("prior-t{}", t + 1),
            Strategy::DeepSupervision(t) => format!("ds-t{}", t + 1),
            Strategy::Kendall => "kendall".into(),
            Strategy::AuxiSingle(t) => format!("auxi-t{}", t + 1),
            Strategy::AuxiBoth => "auxi-both".into(),
            Strategy::AuxiNas(_) => "auxi-nas".into(),
        }
    }

    /// The task index carried by the strategy, if any.
    pub fn task(&self) -> Option<usize> {
        match *self {
            Strategy::Single(t) | Strategy::Prior(t) | Strategy::DeepSupervision(t) | Strategy::AuxiSingle(t) => Some(t),
            _ => None,
        }
    }

    /// Task whose `Single` checkpoint initializes the shared layers.
    pub fn donor_task(&self, tasks: usize) -> Option<usize> {
        match *self {
            Strategy::Prior(t) => Some(t),
            Strategy::AuxiSingle(t) => (0..tasks).find(|&d| d != t),
            _ => None,
        }
    }

    /// Whether the initial learning rate is divided by [`LR_DIVISOR`](super::LR_DIVISOR).
    pub fn reduced_lr(&self) -> bool {
        matches!(self, Strategy::Prior(_) | Strategy::AuxiSingle(_))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}
