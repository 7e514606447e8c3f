mod conv;
mod interp;

pub(crate) use interp::resize_forward;

use super::graph::{BnStats, Graph, Op, Var};
use super::{dims4, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            groups: 1,
            pad: 0,
        }
    }
}

impl Conv2dSpec {
    /// Stride-1 "same" padding for an odd kernel.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            groups: 1,
            pad: dilation * (k - 1) / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn unary_map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_fn(t.shape().to_vec(), |i| f(t.data()[i]))
}

fn conv_geom(xs: &[usize], ws: &[usize], spec: &Conv2dSpec) -> Result<conv::ConvGeom> {
    let (n, c, h, w) = dims4(xs)?;
    let (o, cg, kh, kw) = dims4(ws)?;
    if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 || kh == 0 || kw == 0 {
        return Err(Error::dim("conv2d", "stride, dilation, groups and kernel must be >= 1"));
    }
    if c % spec.groups != 0 || o % spec.groups != 0 || cg != c / spec.groups {
        return Err(Error::dim(
            "conv2d",
            format!("input {xs:?}, weight {ws:?}, groups {}", spec.groups),
        ));
    }
    let out = |len: usize, k: usize| -> Option<usize> {
        let span = (len + 2 * spec.pad) as isize - (spec.dilation * (k - 1)) as isize - 1;
        (span >= 0).then(|| span as usize / spec.stride + 1)
    };
    match (out(h, kh), out(w, kw)) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 && n > 0 => Ok(conv::ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho,
            wo,
            stride: spec.stride,
            dilation: spec.dilation,
            groups: spec.groups,
            pad: spec.pad,
        }),
        _ => Err(Error::degenerate(
            "conv2d",
            format!("input {xs:?} with kernel {kh}x{kw} and {spec:?} gives an empty output"),
        )),
    }
}

impl<T: Real> Graph<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geom = conv_geom(self.shape(x), self.shape(w), &spec)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(Error::dim("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new([geom.n, geom.o, geom.ho, geom.wo], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, spec })
    }

    /// Batch normalization over `(N, H, W)` per channel. In training mode the
    /// batch statistics are used and recorded for the running estimate under
    /// `path`; otherwise `running` `(mean, var)` is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        eps: T,
        path: &str,
    ) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm", format!("affine params for {c} channels")));
        }
        let m = n * h * w;
        if m == 0 {
            return Err(Error::degenerate("batch_norm", "N*H*W == 0"));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let (mean, var, batch_stats) = if self.is_training() {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let mf = T::lit(m as f64);
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    s += xd[(ni * c + ci) * hw..][..hw].iter().copied().sum::<T>();
                }
                let mu = s / mf;
                let mut v = T::zero();
                for ni in 0..n {
                    for &e in &xd[(ni * c + ci) * hw..][..hw] {
                        v += (e - mu) * (e - mu);
                    }
                }
                mean[ci] = mu;
                var[ci] = v / mf;
            }
            (mean, var, true)
        } else {
            (running.0.to_vec(), running.1.to_vec(), false)
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    let xh = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        if batch_stats {
            let unbias = if m > 1 {
                T::lit(m as f64 / (m - 1) as f64)
            } else {
                T::one()
            };
            self.record_bn_stats(BnStats {
                path: path.to_string(),
                mean,
                var: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        let t = Tensor::new([n, c, h, w], out)?;
        self.push(
            "batch_norm",
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Batch norm whose affine parameters and running buffers live in `ps`
    /// under `path.{gamma,beta,running_mean,running_var}`.
    pub fn batch_norm_param(&mut self, ps: &ParamSet<T>, path: &str, x: Var, eps: T) -> Result<Var> {
        let gamma = self.param(ps, &format!("{path}.gamma"))?;
        let beta = self.param(ps, &format!("{path}.beta"))?;
        let rm = ps.value(&format!("{path}.running_mean"))?;
        let rv = ps.value(&format!("{path}.running_var"))?;
        self.batch_norm(x, gamma, beta, (rm.data(), rv.data()), eps, path)
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = unary_map(self.value(x), |v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = unary_map(self.value(x), sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = unary_map(self.value(x), |v| v.tanh());
        self.push("tanh", t, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = unary_map(self.value(x), |v| v.exp());
        self.push("exp", t, Op::Exp(x))
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = unary_map(self.value(x), |v| v.abs());
        self.push("abs", t, Op::Abs(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = unary_map(self.value(x), |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p());
        self.push("softplus", t, Op::Softplus(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = unary_map(self.value(x), |v| v * c);
        self.push("scale", t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let t = unary_map(self.value(x), |v| v + c);
        self.push("add_scalar", t, Op::Shift(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let t = unary_map(self.value(x), |v| v.max(lo).min(hi));
        self.push("clamp", t, Op::Clamp(x, lo, hi))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("minimum", a, b, |x, y| if x <= y { x } else { y })?;
        self.push("minimum", t, Op::Minimum(a, b))
    }

    /// Concatenation along axis 1; all other dimensions must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::degenerate("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(Error::dim("concat", format!("rank {} input", base.len())));
        }
        let inner: usize = base[2..].iter().product();
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?}")));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(base[0] * channels * inner);
        for ni in 0..base[0] {
            for &v in xs {
                let chunk = self.shape(v)[1] * inner;
                data.extend_from_slice(&self.value(v).data()[ni * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let t = Tensor::new(shape, data)?;
        self.push("concat", t, Op::Concat(xs.to_vec()))
    }

    /// Slice `start..start+len` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(Error::dim("narrow", format!("{start}+{len} of {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for ni in 0..s[0] {
            data.extend_from_slice(&xd[(ni * s[1] + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let t = Tensor::new(shape, data)?;
        self.push("narrow", t, Op::Narrow { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x))
    }

    /// Zero padding of both spatial axes.
    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let out = interp::pad_forward(self.value(x).data(), n * c, (h, w), pad);
        let t = Tensor::new([n, c, h + 2 * pad, w + 2 * pad], out)?;
        self.push("pad2d", t, Op::Pad { x, pad })
    }

    /// Bilinear resize of the spatial axes.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::degenerate("bilinear_resize", format!("{h}x{w} -> {out_h}x{out_w}")));
        }
        let out = interp::resize_forward(self.value(x).data(), n * c, (h, w), (out_h, out_w), align_corners);
        let t = Tensor::new([n, c, out_h, out_w], out)?;
        self.push("bilinear_resize", t, Op::Resize { x, align_corners })
    }

    /// Bilinear reads of `x` `(N, C, H, W)` at `points` `(N, M, 2)` given as
    /// `(x, y)` pixel coordinates clamped to the border. Output `(N, C, M)`.
    pub fn grid_sample_bilinear(&mut self, x: Var, points: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let ps = self.shape(points).to_vec();
        if ps.len() != 3 || ps[0] != n || ps[2] != 2 {
            return Err(Error::dim("grid_sample", format!("points {ps:?} for input {:?}", self.shape(x))));
        }
        if h == 0 || w == 0 {
            return Err(Error::degenerate("grid_sample", "empty input"));
        }
        let m = ps[1];
        let out = interp::grid_sample_forward(self.value(x).data(), (n, c, h, w), self.value(points).data(), m);
        let t = Tensor::new([n, c, m], out)?;
        self.push("grid_sample", t, Op::GridSample { x, points })
    }

    /// Sampling points of a deformable `k`x`k` stride-1 kernel from offsets
    /// `(N, 2*k*k, H, W)`; see `deform_points_forward` for the layout.
    pub fn deform_points(&mut self, offsets: Var, k: usize, dilation: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(offsets))?;
        if c != 2 * k * k {
            return Err(Error::dim("deform_points", format!("{c} offset channels for k={k}")));
        }
        let pts = interp::deform_points_forward(self.value(offsets).data(), (n, h, w), k, dilation);
        let t = Tensor::new([n, h * k * w * k, 2], pts)?;
        self.push("deform_points", t, Op::DeformPoints { offsets, k })
    }

    /// Reduction over `axes`, keeping reduced axes with size 1.
    pub fn reduce(&mut self, x: Var, op: ReduceOp, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let mut out_shape = s.clone();
        let mut count = 1;
        for &a in &axes {
            if a >= s.len() {
                return Err(Error::dim("reduce", format!("axis {a} of {s:?}")));
            }
            if s[a] == 0 {
                return Err(Error::degenerate("reduce", format!("empty axis {a} of {s:?}")));
            }
            count *= s[a];
            out_shape[a] = 1;
        }
        if self.value(x).numel() == 0 {
            return Err(Error::degenerate("reduce", "empty tensor"));
        }
        let map = ReduceMap::new(&s, &out_shape);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        map.for_each(|i, o| out[o] += self.value(x).data()[i]);
        if op == ReduceOp::Mean {
            let c = T::lit(count as f64);
            out.iter_mut().for_each(|v| *v = *v / c);
        }
        let t = Tensor::new(out_shape, out)?;
        self.push("reduce", t, Op::Reduce { x, op, count })
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let r = self.reduce(x, ReduceOp::Sum, &axes)?;
        self.reshape(r, &[])
    }

    /// Mean of all elements as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let r = self.reduce(x, ReduceOp::Mean, &axes)?;
        self.reshape(r, &[])
    }

    /// Log-softmax along `axis`, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::degenerate("log_softmax", format!("axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| xd[idx(k)]).fold(T::neg_infinity(), T::max);
                let lse = (0..len).map(|k| (xd[idx(k)] - mx).exp()).sum::<T>().ln() + mx;
                for k in 0..len {
                    out[idx(k)] = xd[idx(k)] - lse;
                }
            }
        }
        let t = Tensor::new(s, out)?;
        self.push("log_softmax", t, Op::LogSoftmax { x, axis })
    }

    /// Gathers flat element `indices` of `x` into a rank-1 tensor.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::dim("pick", format!("index {bad} of {} elements", xd.len())));
        }
        let data = indices.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new([indices.len()], data)?;
        self.push(
            "pick",
            t,
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    /// `x` `(N, K)` times `w` `(M, K)` transposed, plus optional bias `(M)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim("linear", format!("{xs:?} x {ws:?}^T")));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::dim("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bd = self.value(b).data();
            out.chunks_mut(m).for_each(|row| row.copy_from_slice(bd));
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(n, k, m, (xd, k as isize, 1), (wd, 1, k as isize), beta, &mut out);
        let t = Tensor::new([n, m], out)?;
        self.push("linear", t, Op::Linear { x, w, b })
    }

    /// Divides each position by the L2 norm over axis 1 (`sqrt(sum x^2 + eps)`).
    pub fn l2_normalize_channels(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("l2_normalize", format!("{s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, 1);
        let xd = self.value(x).data();
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let ss: T = (0..len).map(|k| xd[(o * len + k) * inner + i].powi(2)).sum();
                let nrm = (ss + eps).sqrt();
                norms[o * inner + i] = nrm;
                for k in 0..len {
                    let idx = (o * len + k) * inner + i;
                    out[idx] = xd[idx] / nrm;
                }
            }
        }
        let t = Tensor::new(s, out)?;
        self.push("l2_normalize", t, Op::L2Normalize { x, norms })
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn split_axis(s: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        s[..axis].iter().product(),
        s[axis],
        s[axis + 1..].iter().product(),
    )
}

/// Maps flat indices of a tensor to flat indices of its keep-dim reduction.
struct ReduceMap {
    shape: Vec<usize>,
    out_strides: Vec<usize>,
}

impl ReduceMap {
    fn new(shape: &[usize], out_shape: &[usize]) -> Self {
        let mut out_strides = vec![0; shape.len()];
        let mut stride = 1;
        for a in (0..shape.len()).rev() {
            out_strides[a] = if out_shape[a] == 1 { 0 } else { stride };
            stride *= out_shape[a];
        }
        Self {
            shape: shape.to_vec(),
            out_strides,
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let numel: usize = self.shape.iter().product();
        let mut idx = vec![0usize; self.shape.len()];
        let mut o = 0usize;
        for i in 0..numel {
            f(i, o);
            for a in (0..self.shape.len()).rev() {
                idx[a] += 1;
                o += self.out_strides[a];
                if idx[a] < self.shape[a] {
                    break;
                }
                o -= self.out_strides[a] * idx[a];
                idx[a] = 0;
            }
        }
    }
}

type Contributions<T> = Vec<(Var, Vec<T>)>;

/// Gradient contributions of node `i` to its inputs given its output grad.
pub(crate) fn backward_op<T: Real>(g: &Graph<T>, i: usize, gout: &[T]) -> Result<Contributions<T>> {
    let node = &g.nodes[i];
    let out = node.value.data();
    let val = |v: Var| g.value(v).data();
    let wants = |v: Var| g.nodes[v.0].requires_grad;
    let elementwise = |x: Var, f: &dyn Fn(usize) -> T| -> Contributions<T> {
        vec![(x, (0..gout.len()).map(|k| gout[k] * f(k)).collect())]
    };
    let res = match &node.op {
        Op::Leaf => vec![],
        Op::Conv2d { x, w, b, spec } => {
            let geom = conv_geom(g.shape(*x), g.shape(*w), spec)?;
            let (gx, gw, gb) = conv::backward(
                &geom,
                val(*x),
                val(*w),
                gout,
                wants(*x),
                wants(*w),
                b.is_some_and(|b| wants(b)),
            );
            let mut v = Vec::new();
            if wants(*x) {
                v.push((*x, gx));
            }
            if wants(*w) {
                v.push((*w, gw));
            }
            if let Some(b) = b.filter(|b| wants(*b)) {
                v.push((b, gb));
            }
            v
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (n, c, h, w) = dims4(g.shape(*x))?;
            let hw = h * w;
            let m = T::lit((n * hw) as f64);
            let gam = val(*gamma);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * hw;
                    for k in off..off + hw {
                        dgamma[ci] += gout[k] * xhat[k];
                        dbeta[ci] += gout[k];
                    }
                }
            }
            let mut gx = vec![T::zero(); gout.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * hw;
                    let scale = gam[ci] * inv_std[ci];
                    for k in off..off + hw {
                        gx[k] = if *batch_stats {
                            scale * (gout[k] - dbeta[ci] / m - xhat[k] * dgamma[ci] / m)
                        } else {
                            scale * gout[k]
                        };
                    }
                }
            }
            vec![(*x, gx), (*gamma, dgamma), (*beta, dbeta)]
        }
        Op::Relu(x) => elementwise(*x, &|k| if out[k] > T::zero() { T::one() } else { T::zero() }),
        Op::Sigmoid(x) => elementwise(*x, &|k| out[k] * (T::one() - out[k])),
        Op::Tanh(x) => elementwise(*x, &|k| T::one() - out[k] * out[k]),
        Op::Exp(x) => elementwise(*x, &|k| out[k]),
        Op::Abs(x) => {
            let xv = val(*x);
            elementwise(*x, &|k| {
                if xv[k] > T::zero() {
                    T::one()
                } else if xv[k] < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            })
        }
        Op::Softplus(x) => {
            let xv = val(*x);
            elementwise(*x, &|k| sigmoid(xv[k]))
        }
        Op::Scale(x, c) => elementwise(*x, &|_| *c),
        Op::Shift(x) => vec![(*x, gout.to_vec())],
        Op::Clamp(x, lo, hi) => {
            let xv = val(*x);
            elementwise(*x, &|k| {
                if xv[k] >= *lo && xv[k] <= *hi {
                    T::one()
                } else {
                    T::zero()
                }
            })
        }
        Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
        Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|&v| -v).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            vec![
                (*a, gout.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()),
                (*b, gout.iter().zip(av).map(|(&gv, &x)| gv * x).collect()),
            ]
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let take_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
            vec![
                (*a, gout.iter().zip(&take_a).map(|(&gv, &t)| if t { gv } else { T::zero() }).collect()),
                (*b, gout.iter().zip(&take_a).map(|(&gv, &t)| if t { T::zero() } else { gv }).collect()),
            ]
        }
        Op::Concat(xs) => {
            let s = node.value.shape();
            let inner: usize = s[2..].iter().product();
            let total = s[1] * inner;
            let mut start = 0;
            let mut v = Vec::with_capacity(xs.len());
            for &x in xs {
                let chunk = g.shape(x)[1] * inner;
                let mut gx = Vec::with_capacity(s[0] * chunk);
                for ni in 0..s[0] {
                    gx.extend_from_slice(&gout[ni * total + start..][..chunk]);
                }
                start += chunk;
                v.push((x, gx));
            }
            v
        }
        Op::Narrow { x, start } => {
            let s = g.shape(*x);
            let len = node.value.shape()[1];
            let inner: usize = s[2..].iter().product();
            let mut gx = vec![T::zero(); g.value(*x).numel()];
            for ni in 0..s[0] {
                gx[(ni * s[1] + start) * inner..][..len * inner]
                    .copy_from_slice(&gout[ni * len * inner..][..len * inner]);
            }
            vec![(*x, gx)]
        }
        Op::Reshape(x) => vec![(*x, gout.to_vec())],
        Op::Pad { x, pad } => {
            let (n, c, h, w) = dims4(g.shape(*x))?;
            vec![(*x, interp::pad_backward(gout, n * c, (h, w), *pad))]
        }
        Op::Resize { x, align_corners } => {
            let (n, c, h, w) = dims4(g.shape(*x))?;
            let (_, _, oh, ow) = node.value.dims4()?;
            vec![(*x, interp::resize_backward(gout, n * c, (h, w), (oh, ow), *align_corners))]
        }
        Op::GridSample { x, points } => {
            let dims = dims4(g.shape(*x))?;
            let m = g.shape(*points)[1];
            let (gx, gp) = interp::grid_sample_backward(val(*x), dims, val(*points), m, gout);
            vec![(*x, gx), (*points, gp)]
        }
        Op::DeformPoints { offsets, k, .. } => {
            let (n, _, h, w) = dims4(g.shape(*offsets))?;
            vec![(*offsets, interp::deform_points_backward(gout, (n, h, w), *k))]
        }
        Op::Reduce { x, op, count } => {
            let map = ReduceMap::new(g.shape(*x), node.value.shape());
            let mut gx = vec![T::zero(); g.value(*x).numel()];
            let scale = match op {
                ReduceOp::Sum => T::one(),
                ReduceOp::Mean => T::one() / T::lit(*count as f64),
            };
            map.for_each(|i, o| gx[i] = gout[o] * scale);
            vec![(*x, gx)]
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            let mut gx = vec![T::zero(); gout.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let gs: T = (0..len).map(|k| gout[idx(k)]).sum();
                    for k in 0..len {
                        gx[idx(k)] = gout[idx(k)] - out[idx(k)].exp() * gs;
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Pick { x, indices } => {
            let mut gx = vec![T::zero(); g.value(*x).numel()];
            for (&idx, &gv) in indices.iter().zip(gout) {
                gx[idx] += gv;
            }
            vec![(*x, gx)]
        }
        Op::Linear { x, w, b } => {
            let (n, k) = (g.shape(*x)[0], g.shape(*x)[1]);
            let m = g.shape(*w)[0];
            let (xd, wd) = (val(*x), val(*w));
            let mut gx = vec![T::zero(); n * k];
            let mut gw = vec![T::zero(); m * k];
            let mut gb = vec![T::zero(); m];
            for row in gout.chunks(m) {
                gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            T::gemm(n, m, k, (gout, m as isize, 1), (wd, k as isize, 1), T::zero(), &mut gx);
            T::gemm(m, n, k, (gout, 1, m as isize), (xd, k as isize, 1), T::zero(), &mut gw);
            let mut v = vec![(*x, gx), (*w, gw)];
            if let Some(b) = b {
                v.push((*b, gb));
            }
            v
        }
        Op::L2Normalize { x, norms } => {
            let (outer, len, inner) = split_axis(node.value.shape(), 1);
            let mut gx = vec![T::zero(); gout.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: T = (0..len).map(|k| gout[idx(k)] * out[idx(k)]).sum();
                    let nrm = norms[o * inner + i];
                    for k in 0..len {
                        gx[idx(k)] = (gout[idx(k)] - out[idx(k)] * dot) / nrm;
                    }
                }
            }
            vec![(*x, gx)]
        }
    };
    Ok(res)
}
