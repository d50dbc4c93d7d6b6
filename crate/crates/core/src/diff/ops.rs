//! Elementwise, broadcast, structural and reduction operators.

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::DiffError;

fn same_shape<S: Real>(tape: &Tape<S>, a: Var, b: Var, op: &str) -> Result<(), DiffError> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(DiffError::Shape(format!("{op}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn zip_map<S: Real>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

impl<S: Real> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        same_shape(self, a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], move |_, g, acc| {
            acc.push((a, g.clone()));
            acc.push((b, g.clone()));
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        same_shape(self, a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, &[a, b], move |_, g, acc| {
            acc.push((a, g.clone()));
            acc.push((b, g.map(|v| -v)));
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        same_shape(self, a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, &[a, b], move |ctx, g, acc| {
            if ctx.needs_grad(a) {
                acc.push((a, zip_map(g, ctx.value(b), |gv, y| gv * y)));
            }
            if ctx.needs_grad(b) {
                acc.push((b, zip_map(g, ctx.value(a), |gv, x| gv * x)));
            }
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        same_shape(self, a, b, "div")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(out, &[a, b], move |ctx, g, acc| {
            let bv = ctx.value(b);
            if ctx.needs_grad(a) {
                acc.push((a, zip_map(g, bv, |gv, y| gv / y)));
            }
            if ctx.needs_grad(b) {
                let av = ctx.value(a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((&gv, &x), &y)| -gv * x / (y * y))
                    .collect();
                acc.push((b, Tensor::new(bv.shape(), data).expect("shape")));
            }
        }))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, &[a], move |_, g, acc| acc.push((a, g.map(|v| v * k))))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, &[a], move |_, g, acc| acc.push((a, g.clone())))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let saved = out.clone();
        self.push(out, &[a], move |_, g, acc| {
            acc.push((a, zip_map(g, &saved, |gv, s| gv * s * (S::one() - s))));
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(S::zero()));
        self.push(out, &[a], move |ctx, g, acc| {
            let grad = zip_map(g, ctx.value(a), |gv, x| if x > S::zero() { gv } else { S::zero() });
            acc.push((a, grad));
        })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, &[a], move |ctx, g, acc| {
            acc.push((a, zip_map(g, ctx.value(a), |gv, x| gv * sign(x))));
        })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, &[a], move |ctx, g, acc| {
            acc.push((a, zip_map(g, ctx.value(a), |gv, x| gv / x)));
        })
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, k: &Tensor<S>) -> Result<Var, DiffError> {
        if self.value(a).shape() != k.shape() {
            return Err(DiffError::Shape(format!(
                "mul_const: {:?} vs {:?}",
                self.value(a).shape(),
                k.shape()
            )));
        }
        let out = zip_map(self.value(a), k, |x, y| x * y);
        let k = k.clone();
        Ok(self.push(out, &[a], move |_, g, acc| {
            acc.push((a, zip_map(g, &k, |gv, y| gv * y)));
        }))
    }

    /// `x[c, i, j] * mask[i, j]` with a constant H×W mask.
    pub fn mul_plane_const(&mut self, x: Var, mask: &[S]) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if mask.len() != h * w {
            return Err(DiffError::Shape(format!(
                "mask has {} entries, image plane {h}×{w}",
                mask.len()
            )));
        }
        let mask = mask.to_vec();
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[c, h, w]);
        for (o, xs) in out.data_mut().chunks_mut(h * w).zip(xv.data().chunks(h * w)) {
            for ((ov, &xv), &m) in o.iter_mut().zip(xs).zip(&mask) {
                *ov = xv * m;
            }
        }
        Ok(self.push(out, &[x], move |_, g, acc| {
            let mut gx = g.clone();
            for plane in gx.data_mut().chunks_mut(h * w) {
                for (v, &m) in plane.iter_mut().zip(&mask) {
                    *v *= m;
                }
            }
            acc.push((x, gx));
        }))
    }

    /// `x[c, i, j] * v[c]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(v).shape() != [c] {
            return Err(DiffError::Shape(format!(
                "mul_channel: vector {:?} for {c} channels",
                self.value(v).shape()
            )));
        }
        let hw = h * w;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for (plane, &k) in out.data_mut().chunks_mut(hw).zip(&vv) {
            plane.iter_mut().for_each(|p| *p *= k);
        }
        Ok(self.push(out, &[x, v], move |ctx, g, acc| {
            if ctx.needs_grad(x) {
                let vv = ctx.value(v).data();
                let mut gx = g.clone();
                for (plane, &k) in gx.data_mut().chunks_mut(hw).zip(vv) {
                    plane.iter_mut().for_each(|p| *p *= k);
                }
                acc.push((x, gx));
            }
            if ctx.needs_grad(v) {
                let xv = ctx.value(x).data();
                let gv: Vec<S> = g
                    .data()
                    .chunks(hw)
                    .zip(xv.chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                    .collect();
                acc.push((v, Tensor::new(&[c], gv).expect("shape")));
            }
        }))
    }

    /// `x[c, i, j] * p[0, i, j]` for a single-channel plane `p`.
    pub fn mul_plane(&mut self, x: Var, p: Var) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(p).shape() != [1, h, w] {
            return Err(DiffError::Shape(format!(
                "mul_plane: plane {:?} for image {:?}",
                self.value(p).shape(),
                [c, h, w]
            )));
        }
        let hw = h * w;
        let pv = self.value(p).data().to_vec();
        let mut out = self.value(x).clone();
        for plane in out.data_mut().chunks_mut(hw) {
            for (o, &k) in plane.iter_mut().zip(&pv) {
                *o *= k;
            }
        }
        Ok(self.push(out, &[x, p], move |ctx, g, acc| {
            let pv = ctx.value(p).data();
            if ctx.needs_grad(x) {
                let mut gx = g.clone();
                for plane in gx.data_mut().chunks_mut(hw) {
                    for (o, &k) in plane.iter_mut().zip(pv) {
                        *o *= k;
                    }
                }
                acc.push((x, gx));
            }
            if ctx.needs_grad(p) {
                let xv = ctx.value(x).data();
                let mut gp = Tensor::zeros(&[1, h, w]);
                for (gplane, xplane) in g.data().chunks(hw).zip(xv.chunks(hw)) {
                    for ((o, &a), &b) in gp.data_mut().iter_mut().zip(gplane).zip(xplane) {
                        *o += a * b;
                    }
                }
                acc.push((p, gp));
            }
        }))
    }

    /// Per-pixel dot product of a 3×H×W field with a constant vector.
    pub fn dot_dir(&mut self, x: Var, dir: [S; 3]) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if c != 3 {
            return Err(DiffError::Shape(format!("dot_dir needs 3 channels, got {c}")));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[1, h, w]);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = xv[i] * dir[0] + xv[hw + i] * dir[1] + xv[2 * hw + i] * dir[2];
        }
        Ok(self.push(out, &[x], move |_, g, acc| {
            let mut gx = Tensor::zeros(&[3, h, w]);
            let gd = gx.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                for k in 0..3 {
                    gd[k * hw + i] = gv * dir[k];
                }
            }
            acc.push((x, gx));
        }))
    }

    /// Per-pixel dot product with a constant per-pixel direction field.
    pub fn dot_field(&mut self, x: Var, field: &Tensor<S>) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if c != 3 || field.shape() != [3, h, w] {
            return Err(DiffError::Shape(format!(
                "dot_field: {:?} vs {:?}",
                self.value(x).shape(),
                field.shape()
            )));
        }
        let hw = h * w;
        let f = field.clone();
        let xv = self.value(x).data();
        let fd = f.data();
        let mut out = Tensor::zeros(&[1, h, w]);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = (0..3).map(|k| xv[k * hw + i] * fd[k * hw + i]).sum();
        }
        Ok(self.push(out, &[x], move |_, g, acc| {
            let mut gx = Tensor::zeros(&[3, h, w]);
            let fd = f.data();
            let gd = gx.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                for k in 0..3 {
                    gd[k * hw + i] = gv * fd[k * hw + i];
                }
            }
            acc.push((x, gx));
        }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| DiffError::Shape("concat of nothing".into()))?;
        let (_, h, w) = self.value(first).chw()?;
        let mut chans = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(DiffError::Shape(format!(
                    "concat: plane {ph}×{pw} vs {h}×{w}"
                )));
            }
            chans.push(c);
            data.extend_from_slice(self.value(p).data());
        }
        let total: usize = chans.iter().sum();
        let out = Tensor::new(&[total, h, w], data)?;
        let parts = parts.to_vec();
        Ok(self.push(out, &parts.clone(), move |ctx, g, acc| {
            let mut off = 0;
            for (&p, &c) in parts.iter().zip(&chans) {
                let n = c * h * w;
                if ctx.needs_grad(p) {
                    let slice = g.data()[off..off + n].to_vec();
                    acc.push((p, Tensor::new(&[c, h, w], slice).expect("shape")));
                }
                off += n;
            }
        }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if start + len > c || len == 0 {
            return Err(DiffError::Shape(format!(
                "slice {start}..{} of {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let data = self.value(x).data()[start * hw..(start + len) * hw].to_vec();
        let out = Tensor::new(&[len, h, w], data)?;
        Ok(self.push(out, &[x], move |_, g, acc| {
            let mut gx = Tensor::zeros(&[c, h, w]);
            gx.data_mut()[start * hw..(start + len) * hw].copy_from_slice(g.data());
            acc.push((x, gx));
        }))
    }

    /// Mirrors a C×H×W tensor left-right.
    pub fn hflip(&mut self, x: Var) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        let flip = move |t: &Tensor<S>| {
            let mut out = Tensor::zeros(&[c, h, w]);
            let src = t.data();
            for (row_out, row_in) in out.data_mut().chunks_mut(w).zip(src.chunks(w)) {
                for (o, &v) in row_out.iter_mut().zip(row_in.iter().rev()) {
                    *o = v;
                }
            }
            out
        };
        let out = flip(self.value(x));
        Ok(self.push(out, &[x], move |_, g, acc| acc.push((x, flip(g)))))
    }

    /// Horizontal concatenation `[a, b]` of two C×H×W tensors.
    pub fn concat_width(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ca, ha) != (cb, hb) {
            return Err(DiffError::Shape(format!(
                "concat_width: {:?} vs {:?}",
                [ca, ha, wa],
                [cb, hb, wb]
            )));
        }
        let w = wa + wb;
        let mut data = Vec::with_capacity(ca * ha * w);
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for (ra, rb) in ad.chunks(wa).zip(bd.chunks(wb)) {
                data.extend_from_slice(ra);
                data.extend_from_slice(rb);
            }
        }
        let out = Tensor::new(&[ca, ha, w], data)?;
        Ok(self.push(out, &[a, b], move |_, g, acc| {
            let mut ga = Vec::with_capacity(ca * ha * wa);
            let mut gb = Vec::with_capacity(ca * ha * wb);
            for row in g.data().chunks(w) {
                ga.extend_from_slice(&row[..wa]);
                gb.extend_from_slice(&row[wa..]);
            }
            acc.push((a, Tensor::new(&[ca, ha, wa], ga).expect("shape")));
            acc.push((b, Tensor::new(&[cb, hb, wb], gb).expect("shape")));
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::scalar(s), &[x], move |_, g, acc| {
            acc.push((x, Tensor::full(&shape, g.item())));
        })
    }

    /// Mean over all elements; an empty tensor has mean 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        if n == 0 {
            let shape = self.value(x).shape().to_vec();
            return self.push(Tensor::scalar(S::zero()), &[x], move |_, _, acc| {
                acc.push((x, Tensor::zeros(&shape)));
            });
        }
        let s = self.sum(x);
        self.scale(s, S::one() / S::from_usize(n).expect("count"))
    }

    /// Mean absolute deviation between two same-shaped tensors.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        Ok(self.mean(ad))
    }

    /// Weighted sum `Σ w_i · x_i` of one-element values.
    pub fn weighted_sum(&mut self, terms: &[(S, Var)]) -> Result<Var, DiffError> {
        let mut total: Option<Var> = None;
        for &(w, v) in terms {
            let t = self.scale(v, w);
            total = Some(match total {
                Some(acc) => self.add(acc, t)?,
                None => t,
            });
        }
        total.ok_or_else(|| DiffError::Shape("empty weighted sum".into()))
    }
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn sign<S: Real>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}
