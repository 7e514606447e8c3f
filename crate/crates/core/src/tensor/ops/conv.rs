//! Direct 2-D convolution with groups, stride, dilation and zero padding.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.c / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.o / self.groups
    }

    /// Output index range along one axis for which the input index
    /// `out * stride + off` lies inside `0..len`.
    fn valid_range(&self, off: isize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (len as isize - 1 - off).div_euclid(s) + 1;
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = hi.clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Visits every (kernel tap, valid output row) pair of one input/output
    /// plane pair with the column range that stays in bounds.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
        let d = self.dilation as isize;
        let p = self.pad as isize;
        for ky in 0..self.kh {
            let offy = ky as isize * d - p;
            let (oy_lo, oy_hi) = self.valid_range(offy, self.h, self.ho);
            for kx in 0..self.kw {
                let offx = kx as isize * d - p;
                let (ox_lo, ox_hi) = self.valid_range(offx, self.w, self.wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = (oy as isize * self.stride as isize + offy) as usize;
                    f(ky * self.kw + kx, oy, iy, ox_lo, ox_hi, offx);
                }
            }
        }
    }
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Ungrouped convolutions run as one matrix product per image.
    fn use_gemm(&self) -> bool {
        self.groups == 1
    }
}

/// Unfolds image `x` (`C x H x W`) into `col` (`C*kh*kw x Ho*Wo`).
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (plane_in, plane_out, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    col.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..g.c {
        let in_plane = &x[c * plane_in..][..plane_in];
        g.for_each_tap(|tap, oy, iy, lo, hi, offx| {
            let row = &mut col[(c * kk + tap) * plane_out + oy * g.wo..][..g.wo];
            let irow = &in_plane[iy * g.w..][..g.w];
            for ox in lo..hi {
                row[ox] = irow[(ox as isize * g.stride as isize + offx) as usize];
            }
        });
    }
}

/// Adjoint of [`im2col`], accumulating into `gx`.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], gx: &mut [T]) {
    let (plane_in, plane_out, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for c in 0..g.c {
        let gplane = &mut gx[c * plane_in..][..plane_in];
        g.for_each_tap(|tap, oy, iy, lo, hi, offx| {
            let row = &col[(c * kk + tap) * plane_out + oy * g.wo..][..g.wo];
            let grow = &mut gplane[iy * g.w..][..g.w];
            for ox in lo..hi {
                grow[(ox as isize * g.stride as isize + offx) as usize] += row[ox];
            }
        });
    }
}

fn forward_gemm<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let k = g.c * g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.o * plane_out];
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * plane_out] };
    for ni in 0..g.n {
        let xi = &x[ni * g.c * plane_in..][..g.c * plane_in];
        let rhs = if g.pointwise() {
            xi
        } else {
            im2col(g, xi, &mut col);
            &col[..]
        };
        let oi = &mut out[ni * g.o * plane_out..][..g.o * plane_out];
        if let Some(b) = b {
            for (oc, plane) in oi.chunks_mut(plane_out).enumerate() {
                plane.iter_mut().for_each(|v| *v = b[oc]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(g.o, k, plane_out, (w, k as isize, 1), (rhs, plane_out as isize, 1), beta, oi);
    }
    out
}

fn backward_gemm<T: Real>(g: &ConvGeom, x: &[T], w: &[T], gout: &[T], gx: &mut [T], gw: &mut [T], want_x: bool, want_w: bool) {
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let k = g.c * g.kh * g.kw;
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * plane_out] };
    let mut gcol = if want_x { vec![T::zero(); k * plane_out] } else { Vec::new() };
    for ni in 0..g.n {
        let go = &gout[ni * g.o * plane_out..][..g.o * plane_out];
        if want_w {
            let xi = &x[ni * g.c * plane_in..][..g.c * plane_in];
            let cols = if g.pointwise() {
                xi
            } else {
                im2col(g, xi, &mut col);
                &col[..]
            };
            // gw (O x K) += gout (O x HW) * cols^T
            T::gemm(g.o, plane_out, k, (go, plane_out as isize, 1), (cols, 1, plane_out as isize), T::one(), gw);
        }
        if want_x {
            let gxi = &mut gx[ni * g.c * plane_in..][..g.c * plane_in];
            if g.pointwise() {
                T::gemm(k, g.o, plane_out, (w, 1, k as isize), (go, plane_out as isize, 1), T::one(), gxi);
            } else {
                T::gemm(k, g.o, plane_out, (w, 1, k as isize), (go, plane_out as isize, 1), T::zero(), &mut gcol);
                col2im(g, &gcol, gxi);
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    if g.use_gemm() {
        return forward_gemm(g, x, w, b);
    }
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let kk = g.kh * g.kw;
    let cg = g.cin_per_group();
    let og = g.cout_per_group();
    let s = g.stride;
    let mut out = vec![T::zero(); g.n * g.o * plane_out];
    for ni in 0..g.n {
        for oc in 0..g.o {
            let grp = oc / og;
            let out_plane = &mut out[(ni * g.o + oc) * plane_out..][..plane_out];
            if let Some(b) = b {
                out_plane.iter_mut().for_each(|v| *v = b[oc]);
            }
            for icg in 0..cg {
                let ic = grp * cg + icg;
                let in_plane = &x[(ni * g.c + ic) * plane_in..][..plane_in];
                let wk = &w[(oc * cg + icg) * kk..][..kk];
                g.for_each_tap(|tap, oy, iy, lo, hi, offx| {
                    let wv = wk[tap];
                    let orow = &mut out_plane[oy * g.wo..][..g.wo];
                    let irow = &in_plane[iy * g.w..][..g.w];
                    if s == 1 {
                        let start = (lo as isize + offx) as usize;
                        for (o, &i) in orow[lo..hi].iter_mut().zip(&irow[start..]) {
                            *o += wv * i;
                        }
                    } else {
                        for ox in lo..hi {
                            let ix = (ox as isize * s as isize + offx) as usize;
                            orow[ox] += wv * irow[ix];
                        }
                    }
                });
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let kk = g.kh * g.kw;
    let cg = g.cin_per_group();
    let og = g.cout_per_group();
    let s = g.stride;
    let mut gx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![T::zero(); w.len()] } else { Vec::new() };
    let mut gb = if want_b { vec![T::zero(); g.o] } else { Vec::new() };
    if g.use_gemm() {
        if want_b {
            for ni in 0..g.n {
                for oc in 0..g.o {
                    gb[oc] += gout[(ni * g.o + oc) * plane_out..][..plane_out].iter().copied().sum::<T>();
                }
            }
        }
        backward_gemm(g, x, w, gout, &mut gx, &mut gw, want_x, want_w);
        return (gx, gw, gb);
    }
    for ni in 0..g.n {
        for oc in 0..g.o {
            let grp = oc / og;
            let gplane = &gout[(ni * g.o + oc) * plane_out..][..plane_out];
            if want_b {
                gb[oc] += gplane.iter().copied().sum::<T>();
            }
            for icg in 0..cg {
                let ic = grp * cg + icg;
                let in_off = (ni * g.c + ic) * plane_in;
                let w_off = (oc * cg + icg) * kk;
                g.for_each_tap(|tap, oy, iy, lo, hi, offx| {
                    let grow = &gplane[oy * g.wo..][..g.wo];
                    if want_w {
                        let irow = &x[in_off + iy * g.w..][..g.w];
                        let mut acc = T::zero();
                        for ox in lo..hi {
                            let ix = (ox as isize * s as isize + offx) as usize;
                            acc += grow[ox] * irow[ix];
                        }
                        gw[w_off + tap] += acc;
                    }
                    if want_x {
                        let wv = w[w_off + tap];
                        let gxrow = &mut gx[in_off + iy * g.w..][..g.w];
                        for ox in lo..hi {
                            let ix = (ox as isize * s as isize + offx) as usize;
                            gxrow[ix] += wv * grow[ox];
                        }
                    }
                });
            }
        }
    }
    (gx, gw, gb)
}
