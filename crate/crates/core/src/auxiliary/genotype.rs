use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{AdaptorOp, AggOp};

/// Version of the adaptor/aggregator token tables.
pub const OP_VOCAB_VERSION: u32 = 1;

/// One cell: two input locations, an adaptor on each, and an aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AuxCell {
    pub in1: usize,
    pub in2: usize,
    pub op1: AdaptorOp,
    pub op2: AdaptorOp,
    pub agg: AggOp,
}

impl AuxCell {
    pub fn tokens(&self) -> [usize; 5] {
        [self.in1, self.in2, self.op1.index(), self.op2.index(), self.agg.index()]
    }

    pub fn from_tokens(t: [usize; 5]) -> Result<Self> {
        let op = |i: usize| AdaptorOp::from_index(i).ok_or_else(|| Error::Codec(format!("adaptor token {i}")));
        Ok(Self {
            in1: t[0],
            in2: t[1],
            op1: op(t[2])?,
            op2: op(t[3])?,
            agg: AggOp::from_index(t[4]).ok_or_else(|| Error::Codec(format!("aggregator token {}", t[4])))?,
        })
    }
}

/// Which earlier cells a cell may read.
///
/// Locations are numbered in generation order: taps `0..P`, then cell `p` of
/// task `t` at `P + t*P + p`. Cell `(t, p)` may read any tap and any cell
/// `(t', p')` with `p' < p` and `t' <= t`; with `cross_task_only` the task
/// must be strictly earlier (`t' < t`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationRule {
    pub cross_task_only: bool,
}

pub fn location_available(taps: usize, t: usize, p: usize, loc: usize, rule: LocationRule) -> bool {
    if loc < taps {
        return true;
    }
    let c = loc - taps;
    let (t2, p2) = (c / taps, c % taps);
    p2 < p && if rule.cross_task_only { t2 < t } else { t2 <= t }
}

pub fn available_locations(taps: usize, t: usize, p: usize, rule: LocationRule) -> Vec<usize> {
    let bound = taps + t * taps + p;
    (0..bound).filter(|&l| location_available(taps, t, p, l, rule)).collect()
}

/// The discrete description of all auxiliary cells: `P` cells per task,
/// stored task-major in generation order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    p: usize,
    t: usize,
    cells: Vec<AuxCell>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeJson {
    #[serde(rename = "P")]
    p: usize,
    #[serde(rename = "T")]
    t: usize,
    op_vocab_version: u32,
    cells: Vec<[usize; 5]>,
}

impl Genotype {
    /// Checks sizes and the location rule.
    pub fn new(p: usize, t: usize, cells: Vec<AuxCell>, rule: LocationRule) -> Result<Self> {
        if p == 0 || t == 0 {
            return Err(Error::GenotypeInvalid(format!("P={p}, T={t}")));
        }
        if cells.len() != p * t {
            return Err(Error::GenotypeInvalid(format!("{} cells for P={p}, T={t}", cells.len())));
        }
        let g = Self { p, t, cells };
        g.check(rule)?;
        Ok(g)
    }

    pub fn check(&self, rule: LocationRule) -> Result<()> {
        for (c, cell) in self.cells.iter().enumerate() {
            let (t, p) = (c / self.p, c % self.p);
            for loc in [cell.in1, cell.in2] {
                if !location_available(self.p, t, p, loc, rule) {
                    return Err(Error::GenotypeInvalid(format!(
                        "cell {p} of task {t} reads unavailable location {loc}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// All cells in generation order.
    pub fn cells(&self) -> &[AuxCell] {
        &self.cells
    }

    pub fn task_cells(&self, t: usize) -> &[AuxCell] {
        &self.cells[t * self.p..(t + 1) * self.p]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("genotype serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: GenotypeJson = serde_json::from_str(s).map_err(|e| Error::Codec(format!("genotype json: {e}")))?;
        if j.op_vocab_version != OP_VOCAB_VERSION {
            return Err(Error::Codec(format!("operator vocabulary version {}", j.op_vocab_version)));
        }
        let cells = j.cells.into_iter().map(AuxCell::from_tokens).collect::<Result<Vec<_>>>()?;
        Self::new(j.p, j.t, cells, LocationRule::default())
    }
}

impl Serialize for Genotype {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GenotypeJson {
            p: self.p,
            t: self.t,
            op_vocab_version: OP_VOCAB_VERSION,
            cells: self.cells.iter().map(AuxCell::tokens).collect(),
        }
        .serialize(s)
    }
}
