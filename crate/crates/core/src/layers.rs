//! Building blocks: convolutions with batch norm, the adaptor operator
//! vocabulary, aggregators and the ASPP context block.
//!
//! Layers only remember parameter paths and hyper-parameters; values live in
//! a [`ParamSet`], so one layer description serves both `f32` and `f64`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dims4, Conv2dSpec, Graph, ParamKind, ParamSet, ParamTag, Real, ReduceOp, Tensor, Var};

/// Channel width of every auxiliary feature.
pub const C_AUX: usize = 16;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Adaptor operators. The discriminants are controller token values and must
/// never be reordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorOp {
    SepConv3x3 = 0,
    Conv1x1 = 1,
    SepConv3x3Dil3 = 2,
    SepConv3x3Dil6 = 3,
    SkipConnect = 4,
    DeformConv3x3 = 5,
}

impl AdaptorOp {
    pub const ALL: [AdaptorOp; 6] = [
        AdaptorOp::SepConv3x3,
        AdaptorOp::Conv1x1,
        AdaptorOp::SepConv3x3Dil3,
        AdaptorOp::SepConv3x3Dil6,
        AdaptorOp::SkipConnect,
        AdaptorOp::DeformConv3x3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AdaptorOp::SepConv3x3 => "sep_conv3x3",
            AdaptorOp::Conv1x1 => "conv1x1",
            AdaptorOp::SepConv3x3Dil3 => "sep_conv3x3_dil3",
            AdaptorOp::SepConv3x3Dil6 => "sep_conv3x3_dil6",
            AdaptorOp::SkipConnect => "skip_connect",
            AdaptorOp::DeformConv3x3 => "deform_conv3x3",
        }
    }
}

/// Aggregators; discriminants are token values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggOp {
    Sum = 0,
    Concat = 1,
}

impl AggOp {
    pub const ALL: [AggOp; 2] = [AggOp::Sum, AggOp::Concat];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AggOp::Sum => "sum",
            AggOp::Concat => "concat",
        }
    }
}

/// Parameter registration context: target set, initializer stream and the
/// tag stamped on everything created through it.
pub struct Init<'a, T> {
    pub ps: &'a mut ParamSet<T>,
    pub rng: &'a mut Pcg64,
    pub tag: ParamTag,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(ps: &'a mut ParamSet<T>, rng: &'a mut Pcg64, tag: ParamTag) -> Self {
        Self { ps, rng, tag }
    }

    /// Same set and stream under another tag.
    pub fn with_tag(&mut self, tag: ParamTag) -> Init<'_, T> {
        Init {
            ps: self.ps,
            rng: self.rng,
            tag,
        }
    }

    pub fn weight(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        self.ps.insert(path, value, self.tag, ParamKind::Weight)
    }

    pub fn buffer(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        self.ps.insert(path, value, self.tag, ParamKind::Buffer)
    }

    /// He-normal tensor with standard deviation `sqrt(2 / fan_in)`.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-bound..=bound)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub path: String,
    pub spec: Conv2dSpec,
    pub bias: bool,
}

impl Conv {
    /// Kaiming-initialised `cout x (cin/groups) x k x k` kernel, zero bias.
    pub fn build<T: Real>(
        init: &mut Init<T>,
        path: &str,
        (cin, cout, k): (usize, usize, usize),
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        let cg = cin / spec.groups.max(1);
        let w = init.kaiming(&[cout, cg, k, k], cg * k * k);
        Self::register(init, path, w, cout, spec, bias)
    }

    pub fn zeros<T: Real>(
        init: &mut Init<T>,
        path: &str,
        (cin, cout, k): (usize, usize, usize),
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        let w = Tensor::zeros([cout, cin / spec.groups.max(1), k, k]);
        Self::register(init, path, w, cout, spec, bias)
    }

    fn register<T: Real>(
        init: &mut Init<T>,
        path: &str,
        w: Tensor<T>,
        cout: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        init.weight(&format!("{path}.weight"), w)?;
        if bias {
            init.weight(&format!("{path}.bias"), Tensor::zeros([cout]))?;
        }
        Ok(Self {
            path: path.to_string(),
            spec,
            bias,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &format!("{}.weight", self.path))?;
        let b = if self.bias {
            Some(g.param(ps, &format!("{}.bias", self.path))?)
        } else {
            None
        };
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub path: String,
}

impl BatchNorm {
    pub fn build<T: Real>(init: &mut Init<T>, path: &str, c: usize) -> Result<Self> {
        init.weight(&format!("{path}.gamma"), Tensor::ones([c]))?;
        init.weight(&format!("{path}.beta"), Tensor::zeros([c]))?;
        init.buffer(&format!("{path}.running_mean"), Tensor::zeros([c]))?;
        init.buffer(&format!("{path}.running_var"), Tensor::ones([c]))?;
        Ok(Self {
            path: path.to_string(),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        g.batch_norm_param(ps, &self.path, x, T::lit(BN_EPS))
    }
}

/// Bias-free convolution, batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn build<T: Real>(
        init: &mut Init<T>,
        path: &str,
        (cin, cout, k): (usize, usize, usize),
        spec: Conv2dSpec,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::build(init, &format!("{path}.conv"), (cin, cout, k), spec, false)?,
            bn: BatchNorm::build(init, &format!("{path}.bn"), cout)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.bn.forward(g, ps, y)?;
        g.relu(y)
    }
}

/// An instantiated adaptor producing [`C_AUX`] channels at the input size.
#[derive(Debug, Clone)]
pub enum Adaptor {
    /// 1x1 projection with BN and ReLU (the basic adaptor and `conv1x1`).
    Project(ConvBnRelu),
    SepConv {
        depthwise: ConvBnRelu,
        pointwise: ConvBnRelu,
    },
    Skip,
    Deform {
        offset: Conv,
        conv: Conv,
        bn: BatchNorm,
    },
}

impl Adaptor {
    pub fn basic<T: Real>(init: &mut Init<T>, path: &str, cin: usize) -> Result<Self> {
        Self::build(init, path, AdaptorOp::Conv1x1, cin)
    }

    pub fn build<T: Real>(init: &mut Init<T>, path: &str, op: AdaptorOp, cin: usize) -> Result<Self> {
        let sep = |init: &mut Init<T>, dil: usize| -> Result<Adaptor> {
            let dw = Conv2dSpec {
                groups: cin,
                ..Conv2dSpec::same(3, dil)
            };
            Ok(Adaptor::SepConv {
                depthwise: ConvBnRelu::build(init, &format!("{path}.dw"), (cin, cin, 3), dw)?,
                pointwise: ConvBnRelu::build(
                    init,
                    &format!("{path}.pw"),
                    (cin, C_AUX, 1),
                    Conv2dSpec::default(),
                )?,
            })
        };
        match op {
            AdaptorOp::SepConv3x3 => sep(init, 1),
            AdaptorOp::SepConv3x3Dil3 => sep(init, 3),
            AdaptorOp::SepConv3x3Dil6 => sep(init, 6),
            AdaptorOp::Conv1x1 => Ok(Adaptor::Project(ConvBnRelu::build(
                init,
                path,
                (cin, C_AUX, 1),
                Conv2dSpec::default(),
            )?)),
            AdaptorOp::SkipConnect => {
                if cin != C_AUX {
                    return Err(Error::GenotypeInvalid(format!(
                        "skip_connect at `{path}` needs {C_AUX} input channels, got {cin}"
                    )));
                }
                Ok(Adaptor::Skip)
            }
            AdaptorOp::DeformConv3x3 => Ok(Adaptor::Deform {
                offset: Conv::zeros(init, &format!("{path}.offset"), (cin, 18, 3), Conv2dSpec::same(3, 1), true)?,
                conv: Conv::build(
                    init,
                    &format!("{path}.conv"),
                    (cin, C_AUX, 3),
                    Conv2dSpec {
                        stride: 3,
                        ..Conv2dSpec::default()
                    },
                    false,
                )?,
                bn: BatchNorm::build(init, &format!("{path}.bn"), C_AUX)?,
            }),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        match self {
            Adaptor::Project(c) => c.forward(g, ps, x),
            Adaptor::SepConv { depthwise, pointwise } => {
                let y = depthwise.forward(g, ps, x)?;
                pointwise.forward(g, ps, y)
            }
            Adaptor::Skip => Ok(x),
            Adaptor::Deform { offset, conv, bn } => {
                let off = offset.forward(g, ps, x)?;
                let w = g.param(ps, &format!("{}.weight", conv.path))?;
                let y = deform_conv3x3(g, x, off, w)?;
                let y = bn.forward(g, ps, y)?;
                g.relu(y)
            }
        }
    }
}

/// Deformable 3x3 convolution (stride 1, zero padding 1, no modulation) with
/// kernel `w` `(O, C, 3, 3)` and offsets `(N, 18, H, W)`. Each tap is read by
/// bilinear sampling at its regular position plus the offset; with all
/// offsets zero this is exactly a padded 3x3 convolution.
pub fn deform_conv3x3<T: Real>(g: &mut Graph<T>, x: Var, offsets: Var, w: Var) -> Result<Var> {
    let (n, c, h, wd) = dims4(g.shape(x))?;
    let pts = g.deform_points(offsets, 3, 1)?;
    let xp = g.pad2d(x, 1)?;
    let cols = g.grid_sample_bilinear(xp, pts)?;
    let cols = g.reshape(cols, &[n, c, 3 * h, 3 * wd])?;
    g.conv2d(
        cols,
        w,
        None,
        Conv2dSpec {
            stride: 3,
            ..Conv2dSpec::default()
        },
    )
}

/// Fuses two [`C_AUX`]-channel features of equal size.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub op: AggOp,
    proj: Option<ConvBnRelu>,
}

impl Aggregator {
    pub fn build<T: Real>(init: &mut Init<T>, path: &str, op: AggOp) -> Result<Self> {
        let proj = match op {
            AggOp::Sum => None,
            AggOp::Concat => Some(ConvBnRelu::build(
                init,
                &format!("{path}.proj"),
                (2 * C_AUX, C_AUX, 1),
                Conv2dSpec::default(),
            )?),
        };
        Ok(Self { op, proj })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::Contract(format!(
                "aggregate inputs differ: {:?} vs {:?}",
                g.shape(a),
                g.shape(b)
            )));
        }
        match &self.proj {
            None => g.add(a, b),
            Some(proj) => {
                let cat = g.concat_channels(&[a, b])?;
                proj.forward(g, ps, cat)
            }
        }
    }
}

/// Atrous spatial pyramid pooling with dilations 2 and 4 and an image-level
/// branch; output has `cout` channels at the input size.
#[derive(Debug, Clone)]
pub struct Aspp {
    branches: Vec<ConvBnRelu>,
    pool: Conv,
    proj: ConvBnRelu,
}

pub const ASPP_DILATIONS: [usize; 2] = [2, 4];

impl Aspp {
    pub fn build<T: Real>(init: &mut Init<T>, path: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut branches = vec![ConvBnRelu::build(
            init,
            &format!("{path}.b0"),
            (cin, cout, 1),
            Conv2dSpec::default(),
        )?];
        for (i, &d) in ASPP_DILATIONS.iter().enumerate() {
            branches.push(ConvBnRelu::build(
                init,
                &format!("{path}.b{}", i + 1),
                (cin, cout, 3),
                Conv2dSpec::same(3, d),
            )?);
        }
        let pool = Conv::build(init, &format!("{path}.pool"), (cin, cout, 1), Conv2dSpec::default(), true)?;
        let proj = ConvBnRelu::build(init, &format!("{path}.proj"), (4 * cout, cout, 1), Conv2dSpec::default())?;
        Ok(Self { branches, pool, proj })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = dims4(g.shape(x))?;
        let mut outs = Vec::with_capacity(4);
        for b in &self.branches {
            outs.push(b.forward(g, ps, x)?);
        }
        let gap = g.reduce(x, ReduceOp::Mean, &[2, 3])?;
        let p = self.pool.forward(g, ps, gap)?;
        let p = g.relu(p)?;
        outs.push(g.bilinear_resize(p, h, w, false)?);
        let cat = g.concat_channels(&outs)?;
        self.proj.forward(g, ps, cat)
    }
}
