use rand::Rng;
use rand_pcg::Pcg64;

use super::codec::{role, seq_len, vocab, Role, CELL_TOKENS};
use crate::auxiliary::{location_available, LocationRule};
use crate::error::{Error, Result};
use crate::layers::Init;
use crate::tensor::{Graph, ParamSet, ParamTag, Tensor, Var};

pub const EMBED_DIM: usize = 32;
pub const HIDDEN: usize = 64;
/// Added to the logits of unavailable locations.
const MASK: f64 = -1e9;

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Loc => "loc",
        Role::Adaptor => "op",
        Role::Aggregator => "agg",
    }
}

/// Autoregressive LSTM policy over token sequences. Parameters live in a
/// [`ParamSet`] tagged `controller`; output heads start at zero, so the
/// initial policy is uniform over the available tokens.
#[derive(Debug, Clone)]
pub struct Controller {
    p: usize,
    t: usize,
    /// Additive logit mask per position.
    masks: Vec<Vec<f64>>,
}

/// A batch of rolled-out sequences on a graph.
pub struct Rollout {
    pub tokens: Vec<Vec<usize>>,
    /// `B x L` log-probabilities of the chosen tokens.
    pub logp: Var,
    /// `B` sums of per-position entropies.
    pub entropy: Var,
    /// Per position, the `B x V` probabilities the tokens were drawn from.
    pub probs: Vec<Vec<f64>>,
}

impl Controller {
    pub fn new(p: usize, t: usize, rule: LocationRule, ps: &mut ParamSet<f64>, rng: &mut Pcg64) -> Result<Self> {
        if p == 0 || t == 0 {
            return Err(Error::Config(format!("controller for P={p}, T={t}")));
        }
        let mut init = Init::new(ps, rng, ParamTag::Controller);
        let bound = 0.1;
        let e = init.uniform(&[1, EMBED_DIM], bound);
        init.weight("ctrl.emb.start", e)?;
        for r in [Role::Loc, Role::Adaptor, Role::Aggregator] {
            let v = vocab(r, p, t);
            let e = init.uniform(&[v, EMBED_DIM], bound);
            init.weight(&format!("ctrl.emb.{}", role_name(r)), e)?;
        }
        let w = init.uniform(&[4 * HIDDEN, EMBED_DIM + HIDDEN], bound);
        init.weight("ctrl.lstm.weight", w)?;
        init.weight("ctrl.lstm.bias", Tensor::zeros([4 * HIDDEN]))?;
        for r in [Role::Loc, Role::Adaptor, Role::Aggregator] {
            let v = vocab(r, p, t);
            init.weight(&format!("ctrl.head.{}.weight", role_name(r)), Tensor::zeros([v, HIDDEN]))?;
            init.weight(&format!("ctrl.head.{}.bias", role_name(r)), Tensor::zeros([v]))?;
        }
        let masks = (0..seq_len(p, t))
            .map(|pos| {
                let r = role(pos);
                let v = vocab(r, p, t);
                if r != Role::Loc {
                    return vec![0.0; v];
                }
                let c = pos / CELL_TOKENS;
                (0..v)
                    .map(|loc| if location_available(p, c / p, c % p, loc, rule) { 0.0 } else { MASK })
                    .collect()
            })
            .collect();
        Ok(Self { p, t, masks })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn seq_len(&self) -> usize {
        seq_len(self.p, self.t)
    }

    /// Whether `tok` is selectable at `pos`.
    pub fn allowed(&self, pos: usize, tok: usize) -> bool {
        self.masks[pos].get(tok).is_some_and(|&m| m == 0.0)
    }

    /// Runs `b` sequences for `len` positions; `choose(pos, probs)` picks the
    /// token of every sequence from the row-major `b x V` probabilities.
    pub fn rollout(
        &self,
        g: &mut Graph<f64>,
        ps: &ParamSet<f64>,
        b: usize,
        len: usize,
        mut choose: impl FnMut(usize, &[f64]) -> Result<Vec<usize>>,
    ) -> Result<Rollout> {
        if b == 0 || len > self.seq_len() {
            return Err(Error::Contract(format!("rollout of {b} sequences, {len} positions")));
        }
        let w = g.param(ps, "ctrl.lstm.weight")?;
        let bias = g.param(ps, "ctrl.lstm.bias")?;
        let start = g.param(ps, "ctrl.emb.start")?;
        let mut x = g.pick(start, &(0..b * EMBED_DIM).map(|i| i % EMBED_DIM).collect::<Vec<_>>())?;
        x = g.reshape(x, &[b, EMBED_DIM])?;
        let mut h = g.constant(Tensor::zeros([b, HIDDEN]));
        let mut c = g.constant(Tensor::zeros([b, HIDDEN]));
        let mut tokens = vec![Vec::with_capacity(len); b];
        let mut logps = Vec::with_capacity(len);
        let mut entropy: Option<Var> = None;
        let mut all_probs = Vec::with_capacity(len);
        for pos in 0..len {
            let xh = g.concat_channels(&[x, h])?;
            let z = g.linear(xh, w, Some(bias))?;
            let gate = |g: &mut Graph<f64>, k: usize| g.narrow(z, k * HIDDEN, HIDDEN);
            let (zi, zf, zg, zo) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
            let (i, f, cand, o) = (g.sigmoid(zi)?, g.sigmoid(zf)?, g.tanh(zg)?, g.sigmoid(zo)?);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c)?;
            h = g.mul(o, tc)?;

            let r = role_name(role(pos));
            let hw = g.param(ps, &format!("ctrl.head.{r}.weight"))?;
            let hb = g.param(ps, &format!("ctrl.head.{r}.bias"))?;
            let logits = g.linear(h, hw, Some(hb))?;
            let v = self.masks[pos].len();
            let mask = g.constant(Tensor::from_fn([b, v], |k| self.masks[pos][k % v]));
            let masked = g.add(logits, mask)?;
            let lp = g.log_softmax(masked, 1)?;
            let probs: Vec<f64> = g.value(lp).data().iter().map(|l| l.exp()).collect();
            let chosen = choose(pos, &probs)?;
            if chosen.len() != b || chosen.iter().any(|&k| k >= v) {
                return Err(Error::Contract(format!("invalid tokens {chosen:?} at position {pos}")));
            }
            for (row, &k) in chosen.iter().enumerate() {
                tokens[row].push(k);
            }
            let picked = g.pick(lp, &chosen.iter().enumerate().map(|(row, &k)| row * v + k).collect::<Vec<_>>())?;
            logps.push(g.reshape(picked, &[b, 1])?);

            let p = g.exp(lp)?;
            let plogp = g.mul(p, lp)?;
            let s = g.reduce(plogp, crate::tensor::ReduceOp::Sum, &[1])?;
            let s = g.reshape(s, &[b])?;
            let ent = g.scale(s, -1.0)?;
            entropy = Some(match entropy {
                Some(e) => g.add(e, ent)?,
                None => ent,
            });
            all_probs.push(probs);

            let emb = g.param(ps, &format!("ctrl.emb.{r}"))?;
            let rows: Vec<usize> = chosen.iter().flat_map(|&k| (0..EMBED_DIM).map(move |d| k * EMBED_DIM + d)).collect();
            x = g.pick(emb, &rows)?;
            x = g.reshape(x, &[b, EMBED_DIM])?;
        }
        let logp = if logps.is_empty() {
            g.constant(Tensor::zeros([b, 0]))
        } else {
            g.concat_channels(&logps)?
        };
        let entropy = match entropy {
            Some(e) => e,
            None => g.constant(Tensor::zeros([b])),
        };
        Ok(Rollout {
            tokens,
            logp,
            entropy,
            probs: all_probs,
        })
    }

    /// Samples `b` full sequences. Returns tokens, per-token log-probs and
    /// per-sequence entropy.
    pub fn sample(&self, ps: &ParamSet<f64>, rng: &mut Pcg64, b: usize) -> Result<Vec<Sampled>> {
        let mut g = Graph::new(false);
        let r = self.rollout(&mut g, ps, b, self.seq_len(), |_, probs| {
            let v = probs.len() / b;
            Ok(probs.chunks(v).map(|row| draw(row, rng.random::<f64>())).collect())
        })?;
        let lp = g.value(r.logp).data();
        let ent = g.value(r.entropy).data();
        let l = self.seq_len();
        Ok(r.tokens
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Sampled {
                tokens,
                logps: lp[i * l..(i + 1) * l].to_vec(),
                entropy: ent[i],
            })
            .collect())
    }

    /// Probabilities of the next token after `prefix`.
    pub fn next_distribution(&self, ps: &ParamSet<f64>, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(false);
        let r = self.rollout(&mut g, ps, 1, prefix.len() + 1, |pos, _| Ok(vec![prefix.get(pos).copied().unwrap_or(0)]))?;
        Ok(r.probs.last().cloned().unwrap_or_default())
    }
}

/// One sampled sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<usize>,
    pub logps: Vec<f64>,
    pub entropy: f64,
}

/// Inverse-CDF draw; zero-probability entries are never chosen.
fn draw(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = k;
            if target < acc {
                return k;
            }
        }
    }
    last
}
