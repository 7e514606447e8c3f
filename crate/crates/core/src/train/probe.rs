use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, ParamTag, Real};

/// Shared layers watched by default (one per encoder resolution).
pub const DEFAULT_PROBE_LAYERS: [&str; 3] = ["enc.s1.conv.conv.weight", "enc.s2.conv.conv.weight", "enc.s3.conv.conv.weight"];

/// Mean `|grad|` over a fixed random subset of each tracked shared layer.
#[derive(Debug, Clone)]
pub struct GradProbe {
    layers: Vec<(String, Vec<usize>)>,
}

impl GradProbe {
    pub fn new<T: Real>(ps: &ParamSet<T>, paths: &[String], per_layer: usize, seed: u64) -> Result<Self> {
        let mut rng = Pcg64::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(paths.len());
        for path in paths {
            let p = ps
                .get(path)
                .map_err(|_| Error::Config(format!("probe layer `{path}` is not a parameter")))?;
            if p.tag != ParamTag::Shared {
                return Err(Error::Config(format!("probe layer `{path}` is not shared")));
            }
            let n = p.value.numel();
            let mut idx = rand::seq::index::sample(&mut rng, n, per_layer.min(n)).into_vec();
            idx.sort_unstable();
            layers.push((path.clone(), idx));
        }
        Ok(Self { layers })
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(p, _)| p.as_str())
    }

    pub fn probe<T: Real>(&self, ps: &ParamSet<T>) -> Result<Vec<f64>> {
        self.layers
            .iter()
            .map(|(path, idx)| {
                let g = &ps.get(path)?.grad;
                Ok(idx.iter().map(|&i| g[i].as_f64().abs()).sum::<f64>() / idx.len().max(1) as f64)
            })
            .collect()
    }
}
