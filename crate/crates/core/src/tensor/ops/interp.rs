//! Bilinear resampling kernels.

use crate::tensor::Real;

/// Source taps `(i0, i1, frac)` for every output coordinate along one axis.
pub(crate) fn axis_taps<T: Real>(inp: usize, out: usize, align_corners: bool) -> Vec<(usize, usize, T)> {
    (0..out)
        .map(|d| {
            let src = if align_corners {
                if out > 1 {
                    d as f64 * (inp as f64 - 1.0) / (out as f64 - 1.0)
                } else {
                    0.0
                }
            } else {
                ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

pub(crate) fn resize_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    align_corners: bool,
) -> Vec<T> {
    let ty = axis_taps::<T>(h, oh, align_corners);
    let tx = axis_taps::<T>(w, ow, align_corners);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Real>(
    gout: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    align_corners: bool,
) -> Vec<T> {
    let ty = axis_taps::<T>(h, oh, align_corners);
    let tx = axis_taps::<T>(w, ow, align_corners);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &gout[p * oh * ow..][..oh * ow];
        let dst = &mut gx[p * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                dst[y0 * w + x0] += top * (T::one() - lx);
                dst[y0 * w + x1] += top * lx;
                dst[y1 * w + x0] += bot * (T::one() - lx);
                dst[y1 * w + x1] += bot * lx;
            }
        }
    }
    gx
}

/// Clamped coordinate along an axis of length `len`: `(i0, frac, inside)`.
/// `inside` is false when the coordinate was clamped to the border.
#[inline]
fn clamp_coord<T: Real>(v: T, len: usize) -> (usize, T, bool) {
    let max = T::lit((len - 1) as f64);
    let (c, inside) = if v < T::zero() {
        (T::zero(), false)
    } else if v > max {
        (max, false)
    } else {
        (v, true)
    };
    if len == 1 {
        return (0, T::zero(), inside);
    }
    let i0 = c.floor().to_usize().unwrap_or(0).min(len - 2);
    (i0, c - T::lit(i0 as f64), inside)
}

/// `x`: `(n, c, h, w)`, `points`: `(n, m, 2)` as `(x, y)` pixel coordinates.
pub(crate) fn grid_sample_forward<T: Real>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    points: &[T],
    m: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * m];
    for ni in 0..n {
        for mi in 0..m {
            let pt = &points[(ni * m + mi) * 2..][..2];
            let (x0, lx, _) = clamp_coord(pt[0], w);
            let (y0, ly, _) = clamp_coord(pt[1], h);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ci in 0..c {
                let plane = &x[(ni * c + ci) * h * w..][..h * w];
                let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                out[(ni * c + ci) * m + mi] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_points)`.
pub(crate) fn grid_sample_backward<T: Real>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    points: &[T],
    m: usize,
    gout: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gp = vec![T::zero(); points.len()];
    for ni in 0..n {
        for mi in 0..m {
            let pt = &points[(ni * m + mi) * 2..][..2];
            let (x0, lx, in_x) = clamp_coord(pt[0], w);
            let (y0, ly, in_y) = clamp_coord(pt[1], h);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let mut dpx = T::zero();
            let mut dpy = T::zero();
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let g = gout[(ni * c + ci) * m + mi];
                let plane = &x[base..][..h * w];
                let (v00, v01) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                let (v10, v11) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                let gplane = &mut gx[base..][..h * w];
                gplane[y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                gplane[y0 * w + x1] += g * (T::one() - ly) * lx;
                gplane[y1 * w + x0] += g * ly * (T::one() - lx);
                gplane[y1 * w + x1] += g * ly * lx;
                if w > 1 {
                    dpx += g * ((T::one() - ly) * (v01 - v00) + ly * (v11 - v10));
                }
                if h > 1 {
                    dpy += g * ((T::one() - lx) * (v10 - v00) + lx * (v11 - v01));
                }
            }
            let gpt = &mut gp[(ni * m + mi) * 2..][..2];
            if in_x {
                gpt[0] += dpx;
            }
            if in_y {
                gpt[1] += dpy;
            }
        }
    }
    (gx, gp)
}

pub(crate) fn pad_forward<T: Real>(x: &[T], planes: usize, (h, w): (usize, usize), pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            let src = &x[(p * h + y) * w..][..w];
            out[(p * ph + y + pad) * pw + pad..][..w].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn pad_backward<T: Real>(g: &[T], planes: usize, (h, w): (usize, usize), pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut gx = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            gx.extend_from_slice(&g[(p * ph + y + pad) * pw + pad..][..w]);
        }
    }
    gx
}

/// Sampling locations of a stride-1 `k`x`k` deformable kernel, laid out as the
/// row-major expanded grid `(h*k + ky, w*k + kx)` so that a stride-`k` plain
/// convolution over the sampled columns applies the kernel. Coordinates are
/// relative to the input zero-padded by `dilation * (k - 1) / 2`.
///
/// `offsets`: `(n, 2*k*k, h, w)`, channel `2*tap` is the y offset and
/// `2*tap + 1` the x offset of kernel tap `tap = ky*k + kx`.
pub(crate) fn deform_points_forward<T: Real>(
    offsets: &[T],
    (n, h, w): (usize, usize, usize),
    k: usize,
    dilation: usize,
) -> Vec<T> {
    let m = h * k * w * k;
    let mut pts = vec![T::zero(); n * m * 2];
    let plane = h * w;
    for ni in 0..n {
        let off = &offsets[ni * 2 * k * k * plane..][..2 * k * k * plane];
        for y in 0..h {
            for ky in 0..k {
                for x in 0..w {
                    for kx in 0..k {
                        let tap = ky * k + kx;
                        let gy = y * k + ky;
                        let gx = x * k + kx;
                        let mi = gy * (w * k) + gx;
                        let dy = off[(2 * tap) * plane + y * w + x];
                        let dx = off[(2 * tap + 1) * plane + y * w + x];
                        let p = &mut pts[(ni * m + mi) * 2..][..2];
                        p[0] = T::lit((x + kx * dilation) as f64) + dx;
                        p[1] = T::lit((y + ky * dilation) as f64) + dy;
                    }
                }
            }
        }
    }
    pts
}

pub(crate) fn deform_points_backward<T: Real>(
    gpts: &[T],
    (n, h, w): (usize, usize, usize),
    k: usize,
) -> Vec<T> {
    let m = h * k * w * k;
    let plane = h * w;
    let mut goff = vec![T::zero(); n * 2 * k * k * plane];
    for ni in 0..n {
        let off = &mut goff[ni * 2 * k * k * plane..][..2 * k * k * plane];
        for y in 0..h {
            for ky in 0..k {
                for x in 0..w {
                    for kx in 0..k {
                        let tap = ky * k + kx;
                        let mi = (y * k + ky) * (w * k) + x * k + kx;
                        let p = &gpts[(ni * m + mi) * 2..][..2];
                        off[(2 * tap) * plane + y * w + x] += p[1];
                        off[(2 * tap + 1) * plane + y * w + x] += p[0];
                    }
                }
            }
        }
    }
    goff
}
