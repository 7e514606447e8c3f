//! Procedural scenes with correlated segmentation, depth and normals.

use rand::Rng;
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use crate::tensor::resize_planes;

/// Label of pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// One scene with all modalities, channel-major (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub h: usize,
    pub w: usize,
    /// RGB in `[0, 1]`.
    pub image: Vec<f32>,
    pub seg: Vec<u8>,
    /// Strictly positive.
    pub depth: Vec<f32>,
    /// Unit vectors, `3 x H x W`.
    pub normal: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            h: 32,
            w: 32,
            classes: 5,
        }
    }
}

/// Random stream of scene `idx` under dataset seed `seed`.
pub fn scene_rng(seed: u64, idx: usize) -> Pcg32 {
    Pcg32::new(seed, idx as u64)
}

fn class_colour(class: usize, classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.5, 0.5, 0.5];
    }
    // evenly spaced hues
    let hue = (class - 1) as f64 / (classes - 1).max(1) as f64 * 6.0;
    let (s, v) = (0.75, 0.9);
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Generates scene `idx`; a pure function of `(seed, idx, cfg)`.
pub fn generate_sample(seed: u64, idx: usize, cfg: &SceneConfig) -> Sample {
    let SceneConfig { h, w, classes } = *cfg;
    let mut rng = scene_rng(seed, idx);
    let (cx0, cy0) = (w as f64 / 2.0, h as f64 / 2.0);

    let d0 = rng.random_range(3.0..5.0);
    let (gx, gy) = (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
    let plane = |x: usize, y: usize| d0 + gx * (x as f64 - cx0) + gy * (y as f64 - cy0);

    let jitter = |rng: &mut Pcg32, c: [f64; 3]| c.map(|v| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
    let bg = jitter(&mut rng, class_colour(0, classes));

    let mut seg = vec![0u8; h * w];
    let mut depth = vec![0.0f64; h * w];
    let mut albedo = vec![bg; h * w];
    for y in 0..h {
        for x in 0..w {
            depth[y * w + x] = plane(x, y);
        }
    }

    let max_size = (h.min(w) as f64 / 4.0).max(4.0);
    let shapes = rng.random_range(1..=4);
    for _ in 0..shapes {
        let class = if classes > 1 { rng.random_range(1..classes) } else { 0 };
        let disk = rng.random_bool(0.5);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(3.0..max_size);
        let ry = if disk { rx } else { rng.random_range(3.0..max_size) };
        let offset = rng.random_range(-1.2..-0.3);
        let colour = jitter(&mut rng, class_colour(class, classes));
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disk {
                    dx * dx + dy * dy <= rx * rx
                } else {
                    dx.abs() <= rx && dy.abs() <= ry
                };
                if inside {
                    let i = y * w + x;
                    seg[i] = class as u8;
                    depth[i] = plane(x, y) + offset;
                    albedo[i] = colour;
                }
            }
        }
    }

    let depth = box_smooth(&depth, h, w);
    let normal = derive_normals(&depth, h, w);
    let mut image = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        let shade = (0.35 + 0.65 * (-(depth[i] - 1.0) / 4.0).exp()) * normal[2 * h * w + i];
        for c in 0..3 {
            let v = albedo[i][c] * shade + rng.random_range(-0.02..0.02);
            image[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Sample {
        h,
        w,
        image,
        seg,
        depth: depth.iter().map(|&d| d as f32).collect(),
        normal: normal.iter().map(|&n| n as f32).collect(),
    }
}

/// 3x3 mean filter with replicated borders.
pub fn box_smooth(d: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| d[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = s / 9.0;
        }
    }
    out
}

/// Unit normals `∝ (-∂d/∂x, -∂d/∂y, 1)` from central differences with
/// replicated borders; output is `3 x H x W`.
pub fn derive_normals(depth: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: usize, x: isize| depth[y * w + x.clamp(0, w as isize - 1) as usize];
    let at_y = |y: isize, x: usize| depth[y.clamp(0, h as isize - 1) as usize * w + x];
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = (at(y, x as isize + 1) - at(y, x as isize - 1)) / 2.0;
            let dy = (at_y(y as isize + 1, x) - at_y(y as isize - 1, x)) / 2.0;
            let n = [-dx, -dy, 1.0];
            let norm = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            for c in 0..3 {
                out[c * h * w + y * w + x] = n[c] / norm;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale_min: 0.5,
            scale_max: 2.1,
        }
    }
}

/// Horizontal mirror of every modality; the normal's x component flips sign.
pub fn hflip(s: &Sample) -> Sample {
    let (h, w) = (s.h, s.w);
    let flip = |v: &[f32], planes: usize, neg_plane: Option<usize>| -> Vec<f32> {
        let mut out = vec![0.0; v.len()];
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    let val = v[(p * h + y) * w + (w - 1 - x)];
                    out[(p * h + y) * w + x] = if neg_plane == Some(p) { -val } else { val };
                }
            }
        }
        out
    };
    let mut seg = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            seg[y * w + x] = s.seg[y * w + (w - 1 - x)];
        }
    }
    Sample {
        h,
        w,
        image: flip(&s.image, 3, None),
        seg,
        depth: flip(&s.depth, 1, None),
        normal: flip(&s.normal, 3, Some(0)),
    }
}

/// Resizes by `factor`: bilinear for image, depth and normals, nearest for
/// labels. Depth is divided by `factor` (an enlarged view reads as closer)
/// and normals are re-normalised.
pub fn rescale(s: &Sample, factor: f64) -> Sample {
    let (h, w) = (s.h, s.w);
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    let image = resize_planes(&s.image, 3, (h, w), (nh, nw));
    let depth: Vec<f32> = resize_planes(&s.depth, 1, (h, w), (nh, nw))
        .into_iter()
        .map(|d| (d as f64 / factor) as f32)
        .collect();
    let mut normal = resize_planes(&s.normal, 3, (h, w), (nh, nw));
    renormalise(&mut normal, nh * nw);
    let nearest = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut seg = vec![0; nh * nw];
    for y in 0..nh {
        let sy = nearest(y, nh, h);
        for x in 0..nw {
            seg[y * nw + x] = s.seg[sy * w + nearest(x, nw, w)];
        }
    }
    Sample {
        h: nh,
        w: nw,
        image,
        seg,
        depth,
        normal,
    }
}

fn renormalise(n: &mut [f32], plane: usize) {
    for i in 0..plane {
        let v = [n[i] as f64, n[plane + i] as f64, n[2 * plane + i] as f64];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let u = if norm > 1e-12 { v.map(|c| c / norm) } else { [0.0, 0.0, 1.0] };
        for c in 0..3 {
            n[c * plane + i] = u[c] as f32;
        }
    }
}

/// `ch x cw` window whose top-left corner sits at `(oy, ox)` (possibly
/// negative or past the far edge). Pixels outside the sample read as
/// ignore labels, black image and edge-replicated depth and normals.
pub fn crop(s: &Sample, (oy, ox): (isize, isize), (ch, cw): (usize, usize)) -> Sample {
    let (h, w) = (s.h, s.w);
    let mut out = Sample {
        h: ch,
        w: cw,
        image: vec![0.0; 3 * ch * cw],
        seg: vec![IGNORE; ch * cw],
        depth: vec![0.0; ch * cw],
        normal: vec![0.0; 3 * ch * cw],
    };
    for y in 0..ch {
        let sy = oy + y as isize;
        let cy = sy.clamp(0, h as isize - 1) as usize;
        for x in 0..cw {
            let sx = ox + x as isize;
            let cx = sx.clamp(0, w as isize - 1) as usize;
            let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
            let (o, i) = (y * cw + x, cy * w + cx);
            out.depth[o] = s.depth[i];
            for c in 0..3 {
                out.normal[c * ch * cw + o] = s.normal[c * h * w + i];
                if inside {
                    out.image[c * ch * cw + o] = s.image[c * h * w + i];
                }
            }
            if inside {
                out.seg[o] = s.seg[i];
            }
        }
    }
    out
}

/// Random flip, random rescale in `[scale_min, scale_max]` and a random crop
/// back to the original size.
pub fn augment(s: &Sample, rng: &mut impl Rng, cfg: &AugmentConfig) -> Sample {
    let flip = rng.random_bool(0.5);
    let factor = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let (h, w) = (s.h, s.w);
    let base = if flip { hflip(s) } else { s.clone() };
    let scaled = rescale(&base, factor);
    let span = |have: usize, want: usize| {
        let d = have as i64 - want as i64;
        (d.min(0), d.max(0))
    };
    let (ylo, yhi) = span(scaled.h, h);
    let (xlo, xhi) = span(scaled.w, w);
    let oy = rng.random_range(ylo..=yhi) as isize;
    let ox = rng.random_range(xlo..=xhi) as isize;
    crop(&scaled, (oy, ox), (h, w))
}
