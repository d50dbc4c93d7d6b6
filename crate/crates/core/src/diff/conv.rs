//! Convolution, gated convolution and resampling operators on C×H×W tensors.

use super::ops::sigmoid;
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::DiffError;

/// How samples outside the input plane are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Edge-clamped; a constant input then stays constant through the layer.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(kernel: usize, padding: Padding) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
            padding,
        }
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, k: usize, spec: ConvSpec) -> Result<Self, DiffError> {
        if spec.stride == 0 || k == 0 {
            return Err(DiffError::Shape("zero stride or kernel".into()));
        }
        let (hp, wp) = (h + 2 * spec.pad, w + 2 * spec.pad);
        if hp < k || wp < k {
            return Err(DiffError::Shape(format!(
                "kernel {k} larger than padded input {hp}×{wp}"
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            ho: (hp - k) / spec.stride + 1,
            wo: (wp - k) / spec.stride + 1,
            spec,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source index along an axis of length `n`, or `None` for a zero pad.
    #[inline]
    fn source(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + kk) as isize - self.spec.pad as isize;
        if pos >= 0 && (pos as usize) < n {
            Some(pos as usize)
        } else {
            match self.spec.padding {
                Padding::Zero => None,
                Padding::Replicate => Some(pos.clamp(0, n as isize - 1) as usize),
            }
        }
    }

    fn im2col<S: Real>(&self, x: &[S]) -> Vec<S> {
        let (h, w, k) = (self.h, self.w, self.k);
        let p = self.cols();
        let mut cols = vec![S::zero(); self.rows() * p];
        let xs: Vec<Option<usize>> = (0..k)
            .flat_map(|kx| (0..self.wo).map(move |ox| (kx, ox)))
            .map(|(kx, ox)| self.source(ox, kx, w))
            .collect();
        for ci in 0..self.c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let xmap = &xs[kx * self.wo..(kx + 1) * self.wo];
                    for oy in 0..self.ho {
                        let Some(sy) = self.source(oy, ky, h) else { continue };
                        let src = &plane[sy * w..(sy + 1) * w];
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        for (o, sx) in out.iter_mut().zip(xmap) {
                            if let Some(sx) = *sx {
                                *o = src[sx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<S: Real>(&self, cols: &[S]) -> Vec<S> {
        let (h, w, k) = (self.h, self.w, self.k);
        let p = self.cols();
        let mut dx = vec![S::zero(); self.c * h * w];
        let xs: Vec<Option<usize>> = (0..k)
            .flat_map(|kx| (0..self.wo).map(move |ox| (kx, ox)))
            .map(|(kx, ox)| self.source(ox, kx, w))
            .collect();
        for ci in 0..self.c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    let xmap = &xs[kx * self.wo..(kx + 1) * self.wo];
                    for oy in 0..self.ho {
                        let Some(sy) = self.source(oy, ky, h) else { continue };
                        let dst = &mut plane[sy * w..(sy + 1) * w];
                        let g = &src[oy * self.wo..(oy + 1) * self.wo];
                        for (gv, sx) in g.iter().zip(xmap) {
                            if let Some(sx) = *sx {
                                dst[sx] += *gv;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

fn kernel_dims<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(usize, usize, usize, usize, usize), DiffError> {
    let (c, h, wd) = x.chw()?;
    let [o, ci, kh, kw] = w.shape()[..] else {
        return Err(DiffError::Shape(format!("weights must be O×C×k×k, got {:?}", w.shape())));
    };
    if ci != c || kh != kw {
        return Err(DiffError::Shape(format!(
            "weights {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if b.shape() != [o] {
        return Err(DiffError::Shape(format!("bias {:?} for {o} outputs", b.shape())));
    }
    Ok((c, h, wd, o, kh))
}

/// `out = w · cols + b` as an O×P matrix.
fn affine<S: Real>(w: &[S], b: &[S], cols: &[S], o: usize, rows: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::zero(); o * p];
    for (row, &bv) in out.chunks_mut(p).zip(b) {
        row.iter_mut().for_each(|v| *v = bv);
    }
    S::gemm(o, rows, p, S::one(), w, rows as isize, 1, cols, p as isize, 1, S::one(), &mut out, p as isize, 1);
    out
}

/// Weight, bias and column gradients of an affine map given its upstream grad.
fn affine_backward<S: Real>(
    w: &[S],
    cols: &[S],
    g: &[S],
    o: usize,
    rows: usize,
    p: usize,
    dcols: Option<&mut [S]>,
) -> (Vec<S>, Vec<S>) {
    let mut dw = vec![S::zero(); o * rows];
    // dW = G · colsᵀ
    S::gemm(o, p, rows, S::one(), g, p as isize, 1, cols, 1, p as isize, S::zero(), &mut dw, rows as isize, 1);
    let db = g.chunks(p).map(|r| r.iter().copied().sum()).collect();
    if let Some(dc) = dcols {
        // dcols += Wᵀ · G
        S::gemm(rows, o, p, S::one(), w, 1, rows as isize, g, p as isize, 1, S::one(), dc, p as isize, 1);
    }
    (dw, db)
}

impl<S: Real> Tape<S> {
    /// Cross-correlation of a C×H×W input with O×C×k×k weights plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var, DiffError> {
        let (c, h, wd, o, k) = kernel_dims(self.value(x), self.value(w), self.value(b))?;
        let geo = Geometry::new(c, h, wd, k, spec)?;
        let cols = geo.im2col(self.value(x).data());
        let (rows, p) = (geo.rows(), geo.cols());
        let out = affine(self.value(w).data(), self.value(b).data(), &cols, o, rows, p);
        let out = Tensor::new(&[o, geo.ho, geo.wo], out)?;
        Ok(self.push(out, &[x, w, b], move |ctx, g, acc| {
            let wv = ctx.value(w).data();
            let mut dcols = ctx.needs_grad(x).then(|| vec![S::zero(); rows * p]);
            let (dw, db) = affine_backward(wv, &cols, g.data(), o, rows, p, dcols.as_deref_mut());
            if let Some(dc) = dcols {
                acc.push((x, Tensor::new(&[c, h, wd], geo.col2im(&dc)).expect("shape")));
            }
            acc.push((w, Tensor::new(&[o, c, k, k], dw).expect("shape")));
            acc.push((b, Tensor::new(&[o], db).expect("shape")));
        }))
    }

    /// Gated convolution `conv(x, w_f, b_f) ⊙ σ(conv(x, w_g, b_g))`.
    pub fn gated_conv(
        &mut self,
        x: Var,
        (wf, bf): (Var, Var),
        (wg, bg): (Var, Var),
        spec: ConvSpec,
    ) -> Result<Var, DiffError> {
        let (c, h, wd, o, k) = kernel_dims(self.value(x), self.value(wf), self.value(bf))?;
        let dims_g = kernel_dims(self.value(x), self.value(wg), self.value(bg))?;
        if dims_g != (c, h, wd, o, k) {
            return Err(DiffError::Shape("feature and gate kernels differ".into()));
        }
        let geo = Geometry::new(c, h, wd, k, spec)?;
        let cols = geo.im2col(self.value(x).data());
        let (rows, p) = (geo.rows(), geo.cols());
        let feat = affine(self.value(wf).data(), self.value(bf).data(), &cols, o, rows, p);
        let gate: Vec<S> = affine(self.value(wg).data(), self.value(bg).data(), &cols, o, rows, p)
            .into_iter()
            .map(sigmoid)
            .collect();
        let out: Vec<S> = feat.iter().zip(&gate).map(|(&f, &s)| f * s).collect();
        let out = Tensor::new(&[o, geo.ho, geo.wo], out)?;
        Ok(self.push(out, &[x, wf, bf, wg, bg], move |ctx, g, acc| {
            let gd = g.data();
            let dfeat: Vec<S> = gd.iter().zip(&gate).map(|(&g, &s)| g * s).collect();
            let dgate: Vec<S> = gd
                .iter()
                .zip(&gate)
                .zip(&feat)
                .map(|((&g, &s), &f)| g * f * s * (S::one() - s))
                .collect();
            let mut dcols = ctx.needs_grad(x).then(|| vec![S::zero(); rows * p]);
            let (dwf, dbf) =
                affine_backward(ctx.value(wf).data(), &cols, &dfeat, o, rows, p, dcols.as_deref_mut());
            let (dwg, dbg) =
                affine_backward(ctx.value(wg).data(), &cols, &dgate, o, rows, p, dcols.as_deref_mut());
            if let Some(dc) = dcols {
                acc.push((x, Tensor::new(&[c, h, wd], geo.col2im(&dc)).expect("shape")));
            }
            acc.push((wf, Tensor::new(&[o, c, k, k], dwf).expect("shape")));
            acc.push((bf, Tensor::new(&[o], dbf).expect("shape")));
            acc.push((wg, Tensor::new(&[o, c, k, k], dwg).expect("shape")));
            acc.push((bg, Tensor::new(&[o], dbg).expect("shape")));
        }))
    }

    /// K×K average pooling with stride K. Edge windows that overhang the
    /// input average only the samples they cover (output ⌈H/K⌉×⌈W/K⌉).
    pub fn avg_pool(&mut self, x: Var, kernel: usize) -> Result<Var, DiffError> {
        if kernel == 0 {
            return Err(DiffError::Shape("pool kernel must be ≥ 1".into()));
        }
        let (c, h, w) = self.value(x).chw()?;
        let (ho, wo) = (h.div_ceil(kernel), w.div_ceil(kernel));
        let extent = move |o: usize, n: usize| (o * kernel, ((o + 1) * kernel).min(n));
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[c, ho, wo]);
        {
            let od = out.data_mut();
            for ci in 0..c {
                for oy in 0..ho {
                    let (y0, y1) = extent(oy, h);
                    for ox in 0..wo {
                        let (x0, x1) = extent(ox, w);
                        let mut s = S::zero();
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                s += xv[(ci * h + y) * w + xx];
                            }
                        }
                        od[(ci * ho + oy) * wo + ox] =
                            s / S::from_usize((y1 - y0) * (x1 - x0)).expect("count");
                    }
                }
            }
        }
        Ok(self.push(out, &[x], move |_, g, acc| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            let gd = gx.data_mut();
            for ci in 0..c {
                for oy in 0..ho {
                    let (y0, y1) = extent(oy, h);
                    for ox in 0..wo {
                        let (x0, x1) = extent(ox, w);
                        let share = g.data()[(ci * ho + oy) * wo + ox]
                            / S::from_usize((y1 - y0) * (x1 - x0)).expect("count");
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                gd[(ci * h + y) * w + xx] += share;
                            }
                        }
                    }
                }
            }
            acc.push((x, gx));
        }))
    }

    /// Nearest-neighbour 2× upsampling cropped to `(out_h, out_w)`.
    pub fn upsample2(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if out_h > 2 * h || out_w > 2 * w || out_h == 0 || out_w == 0 {
            return Err(DiffError::Shape(format!(
                "cannot upsample {h}×{w} to {out_h}×{out_w}"
            )));
        }
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let (ci, rem) = (i / (out_h * out_w), i % (out_h * out_w));
            let (y, xx) = (rem / out_w, rem % out_w);
            *o = xv[(ci * h + y / 2) * w + xx / 2];
        }
        Ok(self.push(out, &[x], move |_, g, acc| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            let gd = gx.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                let (ci, rem) = (i / (out_h * out_w), i % (out_h * out_w));
                let (y, xx) = (rem / out_w, rem % out_w);
                gd[(ci * h + y / 2) * w + xx / 2] += gv;
            }
            acc.push((x, gx));
        }))
    }
}
