use crate::auxiliary::{AuxCell, Genotype, LocationRule};
use crate::error::{Error, Result};
use crate::layers::{AdaptorOp, AggOp};

/// Tokens per auxiliary cell: two locations, two adaptors, one aggregator.
pub const CELL_TOKENS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Loc,
    Adaptor,
    Aggregator,
}

pub fn role(pos: usize) -> Role {
    match pos % CELL_TOKENS {
        0 | 1 => Role::Loc,
        2 | 3 => Role::Adaptor,
        _ => Role::Aggregator,
    }
}

pub fn seq_len(p: usize, t: usize) -> usize {
    CELL_TOKENS * p * t
}

/// Size of the location vocabulary: every tap and every cell.
pub fn loc_vocab(p: usize, t: usize) -> usize {
    p + p * t
}

pub fn vocab(role: Role, p: usize, t: usize) -> usize {
    match role {
        Role::Loc => loc_vocab(p, t),
        Role::Adaptor => AdaptorOp::ALL.len(),
        Role::Aggregator => 2,
    }
}

/// Token sequence to genotype with the default location rule.
pub fn decode_tokens(seq: &[usize], p: usize, t: usize) -> Result<Genotype> {
    decode_tokens_with(seq, p, t, LocationRule::default())
}

/// Cells are read task-major. A location token at global cell `c` must be
/// below `P + c` and available under `rule`, else the genotype is invalid.
pub fn decode_tokens_with(seq: &[usize], p: usize, t: usize, rule: LocationRule) -> Result<Genotype> {
    if seq.len() != seq_len(p, t) || p == 0 || t == 0 {
        return Err(Error::Codec(format!(
            "sequence of length {} for P={p}, T={t} (expected {})",
            seq.len(),
            seq_len(p, t)
        )));
    }
    let mut cells = Vec::with_capacity(p * t);
    for (c, tok) in seq.chunks(CELL_TOKENS).enumerate() {
        for &loc in &tok[..2] {
            if loc >= p + c {
                return Err(Error::GenotypeInvalid(format!("cell {c} reads location {loc} of {}", p + c)));
            }
        }
        cells.push(AuxCell::from_tokens([tok[0], tok[1], tok[2], tok[3], tok[4]])?);
    }
    Genotype::new(p, t, cells, rule)
}

pub fn encode_genotype(g: &Genotype) -> Result<Vec<usize>> {
    encode_genotype_with(g, LocationRule::default())
}

pub fn encode_genotype_with(g: &Genotype, rule: LocationRule) -> Result<Vec<usize>> {
    g.check(rule).map_err(|e| Error::Codec(e.to_string()))?;
    Ok(g.cells().iter().flat_map(|c| c.tokens()).collect())
}

/// Per-operator counts over the cells of `genotypes`, adaptors in token
/// order followed by aggregators.
pub fn op_counts<'a>(genotypes: impl IntoIterator<Item = &'a Genotype>) -> ([usize; 6], [usize; 2]) {
    let mut ad = [0; 6];
    let mut ag = [0; 2];
    for g in genotypes {
        for c in g.cells() {
            ad[c.op1.index()] += 1;
            ad[c.op2.index()] += 1;
            ag[c.agg.index()] += 1;
        }
    }
    (ad, ag)
}

pub fn op_names() -> Vec<&'static str> {
    AdaptorOp::ALL
        .iter()
        .map(|o| o.name())
        .chain([AggOp::Sum.name(), AggOp::Concat.name()])
        .collect()
}
