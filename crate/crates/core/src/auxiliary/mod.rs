//! Auxiliary modules: train-time branches that read the encoder taps and are
//! supervised by the task losses. They never feed back into the main path, so
//! removing them leaves the network's predictions untouched.

mod genotype;

pub use genotype::{available_locations, location_available, AuxCell, Genotype, LocationRule, OP_VOCAB_VERSION};

use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::layers::{Adaptor, AggOp, Aggregator, Conv, Init, C_AUX};
use crate::mtl_net::{finish_head, ModelConfig, MtlModel, TaskKind};
use crate::tensor::{dims4, Conv2dSpec, Graph, ParamSet, ParamTag, Real, Var};

#[derive(Debug, Clone)]
struct Head {
    task: usize,
    kind: TaskKind,
    conv: Conv,
}

#[derive(Debug, Clone)]
struct Chain {
    adaptors: Vec<Adaptor>,
    aggs: Vec<Aggregator>,
}

#[derive(Debug, Clone)]
struct BuiltCell {
    cell: AuxCell,
    ad1: Adaptor,
    ad2: Adaptor,
    agg: Aggregator,
}

#[derive(Debug, Clone)]
enum Body {
    /// One chain per head.
    Basic(Vec<Chain>),
    Cells { taps: usize, cells: Vec<BuiltCell> },
}

/// Auxiliary branches for a set of tasks. Parameters are tagged `aux(t)`.
#[derive(Debug, Clone)]
pub struct AuxModules {
    heads: Vec<Head>,
    body: Body,
}

fn head<T: Real>(init: &mut Init<T>, cfg: &ModelConfig, t: usize) -> Result<Head> {
    let task = cfg.tasks[t];
    let conv = Conv::build(
        init,
        &format!("aux.{}.head", task.kind.short()),
        (C_AUX, task.channels(), 1),
        Conv2dSpec::default(),
        true,
    )?;
    Ok(Head {
        task: t,
        kind: task.kind,
        conv,
    })
}

/// The hand-designed chain `h_0 = D_1(O_1)`, `h_p = h_{p-1} ⊙ D_{p+1}(O_{p+1})`
/// over all taps, for each task in `tasks`.
pub fn build_basic_aux<T: Real>(
    cfg: &ModelConfig,
    tasks: &[usize],
    agg: AggOp,
    ps: &mut ParamSet<T>,
    rng: &mut Pcg64,
) -> Result<AuxModules> {
    let mut chains = Vec::new();
    let mut heads = Vec::new();
    for &t in tasks {
        if t >= cfg.tasks.len() {
            return Err(Error::Config(format!("auxiliary task index {t} out of range")));
        }
        let mut init = Init::new(&mut *ps, &mut *rng, ParamTag::Aux(t));
        let name = format!("aux.{}", cfg.tasks[t].kind.short());
        let mut adaptors = Vec::new();
        let mut aggs = Vec::new();
        for (p, &c) in cfg.stage_channels.iter().enumerate() {
            adaptors.push(Adaptor::basic(&mut init, &format!("{name}.ad{p}"), c)?);
            if p > 0 {
                aggs.push(Aggregator::build(&mut init, &format!("{name}.agg{p}"), agg)?);
            }
        }
        chains.push(Chain { adaptors, aggs });
        heads.push(head(&mut init, cfg, t)?);
    }
    Ok(AuxModules {
        heads,
        body: Body::Basic(chains),
    })
}

/// Instantiates a searched genotype; cells are built in generation order and
/// task `t`'s head reads its last cell.
pub fn build_from_genotype<T: Real>(
    g: &Genotype,
    cfg: &ModelConfig,
    rule: LocationRule,
    ps: &mut ParamSet<T>,
    rng: &mut Pcg64,
) -> Result<AuxModules> {
    let p = cfg.taps();
    if g.p() != p || g.t() != cfg.tasks.len() {
        return Err(Error::GenotypeInvalid(format!(
            "genotype is for P={} T={}, model has P={} T={}",
            g.p(),
            g.t(),
            p,
            cfg.tasks.len()
        )));
    }
    g.check(rule)?;
    let channels = |loc: usize| if loc < p { cfg.stage_channels[loc] } else { C_AUX };
    let mut cells = Vec::new();
    let mut heads = Vec::new();
    for t in 0..g.t() {
        let mut init = Init::new(&mut *ps, &mut *rng, ParamTag::Aux(t));
        let name = format!("aux.{}", cfg.tasks[t].kind.short());
        for (i, cell) in g.task_cells(t).iter().enumerate() {
            let path = format!("{name}.cell{i}");
            cells.push(BuiltCell {
                cell: *cell,
                ad1: Adaptor::build(&mut init, &format!("{path}.op1"), cell.op1, channels(cell.in1))?,
                ad2: Adaptor::build(&mut init, &format!("{path}.op2"), cell.op2, channels(cell.in2))?,
                agg: Aggregator::build(&mut init, &format!("{path}.agg"), cell.agg)?,
            });
        }
        heads.push(head(&mut init, cfg, t)?);
    }
    Ok(AuxModules {
        heads,
        body: Body::Cells { taps: p, cells },
    })
}

fn align<T: Real>(g: &mut Graph<T>, x: Var, hw: (usize, usize)) -> Result<Var> {
    let (_, _, h, w) = dims4(g.shape(x))?;
    if (h, w) == hw {
        Ok(x)
    } else {
        g.bilinear_resize(x, hw.0, hw.1, false)
    }
}

impl AuxModules {
    /// Task indices that have an auxiliary head, in head order.
    pub fn tasks(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.task).collect()
    }

    /// Auxiliary predictions `(task, prediction)` at `out_hw`. Adapted
    /// features are resized to the resolution of the first tap before they
    /// are aggregated.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        taps: &[Var],
        out_hw: (usize, usize),
    ) -> Result<Vec<(usize, Var)>> {
        let (_, _, h0, w0) = dims4(g.shape(taps[0]))?;
        let fine = (h0, w0);
        g.push_scope("aux");
        let r = (|| {
            let mut feats = Vec::with_capacity(self.heads.len());
            match &self.body {
                Body::Basic(chains) => {
                    for chain in chains {
                        let first = chain.adaptors[0].forward(g, ps, taps[0])?;
                        let mut h = align(g, first, fine)?;
                        for (p, agg) in chain.aggs.iter().enumerate() {
                            let d = chain.adaptors[p + 1].forward(g, ps, taps[p + 1])?;
                            let d = align(g, d, fine)?;
                            h = agg.forward(g, ps, h, d)?;
                        }
                        feats.push(h);
                    }
                }
                Body::Cells { taps: p, cells } => {
                    let mut locs: Vec<Var> = taps.to_vec();
                    for c in cells {
                        let a = c.ad1.forward(g, ps, locs[c.cell.in1])?;
                        let a = align(g, a, fine)?;
                        let b = c.ad2.forward(g, ps, locs[c.cell.in2])?;
                        let b = align(g, b, fine)?;
                        let out = c.agg.forward(g, ps, a, b)?;
                        locs.push(out);
                    }
                    for h in &self.heads {
                        feats.push(locs[p + h.task * p + p - 1]);
                    }
                }
            }
            self.heads
                .iter()
                .zip(feats)
                .map(|(h, f)| {
                    let raw = h.conv.forward(g, ps, f)?;
                    Ok((h.task, finish_head(g, h.kind, raw, out_hw)?))
                })
                .collect()
        })();
        g.pop_scope();
        r
    }
}

/// Drops every auxiliary (and other train-only) parameter, leaving the
/// inference network.
pub fn strip_aux<T: Real>(model: &MtlModel, ps: &ParamSet<T>) -> (MtlModel, ParamSet<T>) {
    (model.clone(), ps.filtered(|t| t.is_main()))
}
