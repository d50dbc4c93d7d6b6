//! Image-space operators: bilinear warping, Sobel gradients, total variation
//! and per-pixel vector normalization.

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::DiffError;

/// Smoothing term inside the Sobel magnitude square root.
pub const SOBEL_EPS: f64 = 1e-6;

/// Below this norm a normal vector is replaced by the fallback direction.
pub const NORMALIZE_MIN_NORM: f64 = 1e-8;

/// Bilinear stencil of one sample point.
#[derive(Clone, Copy)]
struct Stencil<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: S,
    fy: S,
}

fn stencil<S: Real>(x: S, y: S, w: usize, h: usize) -> Option<Stencil<S>> {
    let (wm, hm) = (S::from_usize(w - 1)?, S::from_usize(h - 1)?);
    if !(x >= S::zero() && x <= wm && y >= S::zero() && y <= hm) {
        return None;
    }
    let axis = |v: S, n: usize| {
        let base = v.floor().to_usize().unwrap_or(0).min(n.saturating_sub(2));
        let hi = (base + 1).min(n - 1);
        (base, hi, v - S::from_usize(base).expect("index"))
    };
    let (x0, x1, fx) = axis(x, w);
    let (y0, y1, fy) = axis(y, h);
    Some(Stencil { x0, x1, y0, y1, fx, fy })
}

impl<S: Real> Tape<S> {
    /// Backward-warps `img` (C×H×W) at `coords` (h×w×2, `(x, y)` in pixel
    /// units). Samples outside `[0, W-1]×[0, H-1]` are zero and flagged
    /// invalid in the returned mask.
    pub fn bilinear_sample(&mut self, img: Var, coords: Var) -> Result<(Var, Vec<bool>), DiffError> {
        let (c, h, w) = self.value(img).chw()?;
        let [th, tw, two] = self.value(coords).shape()[..] else {
            return Err(DiffError::Shape(format!(
                "coords must be h×w×2, got {:?}",
                self.value(coords).shape()
            )));
        };
        if two != 2 {
            return Err(DiffError::Shape("coords last dimension must be 2".into()));
        }
        if h == 0 || w == 0 {
            return Err(DiffError::Shape("cannot sample an empty image".into()));
        }
        let n = th * tw;
        let stencils: Vec<Option<Stencil<S>>> = self
            .value(coords)
            .data()
            .chunks(2)
            .map(|p| stencil(p[0], p[1], w, h))
            .collect();
        let valid: Vec<bool> = stencils.iter().map(Option::is_some).collect();
        let iv = self.value(img).data();
        let mut out = Tensor::zeros(&[c, th, tw]);
        {
            let od = out.data_mut();
            for (t, st) in stencils.iter().enumerate() {
                let Some(s) = st else { continue };
                for ci in 0..c {
                    let at = |y: usize, x: usize| iv[(ci * h + y) * w + x];
                    let top = at(s.y0, s.x0) * (S::one() - s.fx) + at(s.y0, s.x1) * s.fx;
                    let bot = at(s.y1, s.x0) * (S::one() - s.fx) + at(s.y1, s.x1) * s.fx;
                    od[ci * n + t] = top * (S::one() - s.fy) + bot * s.fy;
                }
            }
        }
        let var = self.push(out, &[img, coords], move |ctx, g, acc| {
            let gd = g.data();
            let iv = ctx.value(img).data();
            if ctx.needs_grad(img) {
                let mut gi = Tensor::zeros(&[c, h, w]);
                let gid = gi.data_mut();
                for (t, st) in stencils.iter().enumerate() {
                    let Some(s) = st else { continue };
                    for ci in 0..c {
                        let gv = gd[ci * n + t];
                        let base = ci * h * w;
                        let (ox, oy) = (S::one() - s.fx, S::one() - s.fy);
                        gid[base + s.y0 * w + s.x0] += gv * ox * oy;
                        gid[base + s.y0 * w + s.x1] += gv * s.fx * oy;
                        gid[base + s.y1 * w + s.x0] += gv * ox * s.fy;
                        gid[base + s.y1 * w + s.x1] += gv * s.fx * s.fy;
                    }
                }
                acc.push((img, gi));
            }
            if ctx.needs_grad(coords) {
                let mut gc = Tensor::zeros(&[th, tw, 2]);
                let gcd = gc.data_mut();
                for (t, st) in stencils.iter().enumerate() {
                    let Some(s) = st else { continue };
                    let (mut dx, mut dy) = (S::zero(), S::zero());
                    for ci in 0..c {
                        let at = |y: usize, x: usize| iv[(ci * h + y) * w + x];
                        let gv = gd[ci * n + t];
                        let (i00, i01, i10, i11) =
                            (at(s.y0, s.x0), at(s.y0, s.x1), at(s.y1, s.x0), at(s.y1, s.x1));
                        // A collapsed stencil (single row/column) has no slope.
                        if s.x1 != s.x0 {
                            dx += gv * ((S::one() - s.fy) * (i01 - i00) + s.fy * (i11 - i10));
                        }
                        if s.y1 != s.y0 {
                            dy += gv * ((S::one() - s.fx) * (i10 - i00) + s.fx * (i11 - i01));
                        }
                    }
                    gcd[2 * t] = dx;
                    gcd[2 * t + 1] = dy;
                }
                acc.push((coords, gc));
            }
        });
        Ok((var, valid))
    }

    /// Per-channel Sobel gradient magnitude `sqrt(gx² + gy² + ε)` over the
    /// valid interior, giving C×(H-2)×(W-2) (empty when H or W < 3).
    pub fn sobel_magnitude(&mut self, x: Var) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        let (ho, wo) = (h.saturating_sub(2), w.saturating_sub(2));
        let eps = S::lit(SOBEL_EPS);
        let two = S::lit(2.0);
        let xv = self.value(x).data();
        let grads = move |xv: &[S], ci: usize, y: usize, xx: usize| {
            let at = |dy: usize, dx: usize| xv[(ci * h + y + dy) * w + xx + dx];
            let gx = (at(0, 2) - at(0, 0)) + two * (at(1, 2) - at(1, 0)) + (at(2, 2) - at(2, 0));
            let gy = (at(2, 0) - at(0, 0)) + two * (at(2, 1) - at(0, 1)) + (at(2, 2) - at(0, 2));
            (gx, gy)
        };
        let mut out = Tensor::zeros(&[c, ho, wo]);
        {
            let od = out.data_mut();
            for ci in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let (gx, gy) = grads(xv, ci, y, xx);
                        od[(ci * ho + y) * wo + xx] = (gx * gx + gy * gy + eps).sqrt();
                    }
                }
            }
        }
        let mag = out.clone();
        Ok(self.push(out, &[x], move |ctx, g, acc| {
            let xv = ctx.value(x).data();
            let mut gx_t = Tensor::zeros(&[c, h, w]);
            let gd = gx_t.data_mut();
            for ci in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let idx = (ci * ho + y) * wo + xx;
                        let (gx, gy) = grads(xv, ci, y, xx);
                        let m = mag.data()[idx];
                        let (ax, ay) = (g.data()[idx] * gx / m, g.data()[idx] * gy / m);
                        let mut put = |dy: usize, dx: usize, v: S| {
                            gd[(ci * h + y + dy) * w + xx + dx] += v;
                        };
                        put(0, 2, ax);
                        put(0, 0, -ax - ay);
                        put(1, 2, two * ax);
                        put(1, 0, -two * ax);
                        put(2, 2, ax + ay);
                        put(2, 0, -ax + ay);
                        put(2, 1, two * ay);
                        put(0, 1, -two * ay);
                        put(0, 2, -ay);
                    }
                }
            }
            acc.push((x, gx_t));
        }))
    }

    /// L1 total variation of a C×H×W tensor divided by the pixel count H·W.
    pub fn total_variation(&mut self, x: Var) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        let norm = S::one() / S::from_usize((h * w).max(1)).expect("count");
        let xv = self.value(x).data();
        let mut s = S::zero();
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[(ci * h + y) * w + xx];
                    if xx + 1 < w {
                        s += (xv[(ci * h + y) * w + xx + 1] - v).abs();
                    }
                    if y + 1 < h {
                        s += (xv[(ci * h + y + 1) * w + xx] - v).abs();
                    }
                }
            }
        }
        Ok(self.push(Tensor::scalar(s * norm), &[x], move |ctx, g, acc| {
            let xv = ctx.value(x).data();
            let k = g.item() * norm;
            let mut gx = Tensor::zeros(&[c, h, w]);
            let gd = gx.data_mut();
            let sgn = |d: S| {
                if d > S::zero() {
                    S::one()
                } else if d < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            };
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let i = (ci * h + y) * w + xx;
                        if xx + 1 < w {
                            let d = sgn(xv[i + 1] - xv[i]) * k;
                            gd[i + 1] += d;
                            gd[i] -= d;
                        }
                        if y + 1 < h {
                            let d = sgn(xv[i + w] - xv[i]) * k;
                            gd[i + w] += d;
                            gd[i] -= d;
                        }
                    }
                }
            }
            acc.push((x, gx));
        }))
    }

    /// Normalizes each pixel's 3-vector to unit length. Vectors shorter than
    /// [`NORMALIZE_MIN_NORM`] become `fallback` and pass no gradient.
    pub fn normalize_vectors(&mut self, x: Var, fallback: [S; 3]) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if c != 3 {
            return Err(DiffError::Shape(format!("normalize needs 3 channels, got {c}")));
        }
        let hw = h * w;
        let min_norm = S::lit(NORMALIZE_MIN_NORM);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[3, h, w]);
        let mut norms = vec![S::zero(); hw];
        {
            let od = out.data_mut();
            for i in 0..hw {
                let v = [xv[i], xv[hw + i], xv[2 * hw + i]];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                norms[i] = n;
                for k in 0..3 {
                    od[k * hw + i] = if n < min_norm { fallback[k] } else { v[k] / n };
                }
            }
        }
        let unit = out.clone();
        Ok(self.push(out, &[x], move |_, g, acc| {
            let (gd, ud) = (g.data(), unit.data());
            let mut gx = Tensor::zeros(&[3, h, w]);
            let gxd = gx.data_mut();
            for i in 0..hw {
                let n = norms[i];
                if n < min_norm {
                    continue;
                }
                let dot: S = (0..3).map(|k| gd[k * hw + i] * ud[k * hw + i]).sum();
                for k in 0..3 {
                    gxd[k * hw + i] = (gd[k * hw + i] - ud[k * hw + i] * dot) / n;
                }
            }
            acc.push((x, gx));
        }))
    }
}
