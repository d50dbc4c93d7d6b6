//! Fitting objectives. All losses are recorded on a [`Tape`] so their
//! gradients reach the network heads, the lights and the half-texture.

use crate::diff::{DiffError, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub normal: f64,
    pub symm: f64,
    pub cm: f64,
    pub tv: f64,
    pub mask: f64,
    /// Weight of the pooled L1 term inside the mismatch.
    pub beta: f64,
    /// Pooling window of the mismatch's L1 term.
    pub pool: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            normal: 0.1,
            symm: 0.02,
            cm: 100.0,
            tv: 50.0,
            mask: 1000.0,
            beta: 2500.0,
            pool: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.normal, self.symm, self.cm, self.tv, self.mask, self.beta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("loss weights must be finite and ≥ 0".into());
        }
        if self.pool == 0 {
            return Err("pool window must be ≥ 1".into());
        }
        Ok(())
    }

    /// Weighted total of individual term values.
    pub fn total(&self, t: &LossTerms) -> f64 {
        t.final_
            + self.normal * t.normal
            + self.symm * t.symm
            + self.cm * t.cm
            + self.tv * t.tv
            + self.mask * t.mask
    }
}

/// Unweighted loss term values.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossTerms {
    pub final_: f64,
    pub normal: f64,
    pub symm: f64,
    pub cm: f64,
    pub tv: f64,
    pub mask: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 6] = ["final", "normal", "symm", "cm", "tv", "mask"];

    pub fn values(&self) -> [f64; 6] {
        [self.final_, self.normal, self.symm, self.cm, self.tv, self.mask]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub step: u64,
    pub terms: LossTerms,
    pub total: f64,
}

impl LossReport {
    pub fn new(step: u64, terms: LossTerms, weights: &LossWeights) -> Self {
        Self {
            step,
            terms,
            total: weights.total(&terms),
        }
    }

    /// First non-finite value, named as in the CSV header.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        LossTerms::NAMES
            .iter()
            .zip(self.terms.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
            .or((!self.total.is_finite()).then_some("total"))
    }

    pub const CSV_HEADER: &'static str = "step,final,normal,symm,cm,tv,mask,total";

    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, t.final_, t.normal, t.symm, t.cm, t.tv, t.mask, self.total
        )
    }
}

/// Feature stack compared by the perceptual part of the mismatch.
/// Implement this to plug in an external extractor.
pub trait FeatureExtractor<S: Real> {
    fn features(&self, tape: &mut Tape<S>, image: Var) -> Result<Vec<Var>, DiffError>;
}

/// Sobel gradient magnitudes at three dyadic scales.
#[derive(Clone, Copy, Debug, Default)]
pub struct SobelPyramid;

impl SobelPyramid {
    pub const SCALES: usize = 3;
}

impl<S: Real> FeatureExtractor<S> for SobelPyramid {
    fn features(&self, tape: &mut Tape<S>, image: Var) -> Result<Vec<Var>, DiffError> {
        let mut out = Vec::with_capacity(Self::SCALES);
        let mut x = image;
        for s in 0..Self::SCALES {
            if s > 0 {
                x = tape.avg_pool(x, 2)?;
            }
            out.push(tape.sobel_magnitude(x)?);
        }
        Ok(out)
    }
}

/// Settings shared by every mismatch evaluation.
pub struct Mismatch<'a, S: Real> {
    pub beta: f64,
    pub pool: usize,
    pub extractor: &'a dyn FeatureExtractor<S>,
}

impl<'a, S: Real> Mismatch<'a, S> {
    pub fn new(weights: &LossWeights, extractor: &'a dyn FeatureExtractor<S>) -> Self {
        Self {
            beta: weights.beta,
            pool: weights.pool,
            extractor,
        }
    }

    /// `Δ = P(I1, I2) + β·L1(pool(I1), pool(I2))` where `P` sums the mean
    /// L1 distance of corresponding feature maps.
    pub fn eval(&self, tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var, DiffError> {
        if tape.value(a).shape() != tape.value(b).shape() {
            return Err(DiffError::Shape(format!(
                "mismatch of {:?} and {:?}",
                tape.value(a).shape(),
                tape.value(b).shape()
            )));
        }
        let fa = self.extractor.features(tape, a)?;
        let fb = self.extractor.features(tape, b)?;
        let mut terms = Vec::with_capacity(fa.len() + 1);
        for (x, y) in fa.into_iter().zip(fb) {
            terms.push((S::one(), tape.l1_mean(x, y)?));
        }
        let pa = tape.avg_pool(a, self.pool)?;
        let pb = tape.avg_pool(b, self.pool)?;
        terms.push((S::lit(self.beta), tape.l1_mean(pa, pb)?));
        tape.weighted_sum(&terms)
    }

    /// Mismatch restricted to pixels where `valid` holds: both inputs are
    /// zeroed elsewhere and the result is rescaled from the full plane to
    /// the valid count. No valid pixel gives 0.
    pub fn eval_valid(&self, tape: &mut Tape<S>, a: Var, b: Var, valid: &[bool]) -> Result<Var, DiffError> {
        let n_valid = valid.iter().filter(|v| **v).count();
        if n_valid == 0 {
            return Ok(tape.constant(Tensor::scalar(S::zero())));
        }
        let m: Vec<S> = valid.iter().map(|&v| if v { S::one() } else { S::zero() }).collect();
        let am = tape.mul_plane_const(a, &m)?;
        let bm = tape.mul_plane_const(b, &m)?;
        let d = self.eval(tape, am, bm)?;
        Ok(tape.scale(d, S::lit(valid.len() as f64 / n_valid as f64)))
    }
}

/// Hard foreground indicator `mask > 0.5`.
pub fn hard_mask<S: Real>(mask: &[f32]) -> Vec<S> {
    mask.iter().map(|&m| if m > 0.5 { S::one() } else { S::zero() }).collect()
}

/// `Δ(I·m, T·m)` with `m` the hard target foreground.
pub fn loss_final<S: Real>(
    tape: &mut Tape<S>,
    mm: &Mismatch<'_, S>,
    rendered: Var,
    target: Var,
    target_mask: &[f32],
) -> Result<Var, DiffError> {
    let m = hard_mask::<S>(target_mask);
    let r = tape.mul_plane_const(rendered, &m)?;
    let t = tape.mul_plane_const(target, &m)?;
    mm.eval(tape, r, t)
}

/// Dice smoothing in pixel units.
pub const DICE_EPS: f64 = 1.0;

/// `−log Dice` with `Dice = (2Σpg + ε)/(Σp + Σg + ε)`.
pub fn loss_mask<S: Real>(tape: &mut Tape<S>, pred: Var, gt: Var) -> Result<Var, DiffError> {
    let inter = tape.mul(pred, gt)?;
    let inter = tape.sum(inter);
    let num = tape.scale(inter, S::lit(2.0));
    let num = tape.add_scalar(num, S::lit(DICE_EPS));
    let sp = tape.sum(pred);
    let sg = tape.sum(gt);
    let den = tape.add(sp, sg)?;
    let den = tape.add_scalar(den, S::lit(DICE_EPS));
    let dice = tape.div(num, den)?;
    let ln = tape.ln(dice);
    Ok(tape.scale(ln, -S::one()))
}

pub fn loss_tv<S: Real>(tape: &mut Tape<S>, shadow: Var) -> Result<Var, DiffError> {
    tape.total_variation(shadow)
}

/// Albedo warped into the UV chart, with per-texel validity.
pub struct UvSample {
    pub texture: Var,
    pub valid: Vec<bool>,
}

/// Backward-warps `albedo` through UV→screen `coords` (256×256×2).
pub fn sample_uv<S: Real>(tape: &mut Tape<S>, albedo: Var, coords: &Tensor<S>) -> Result<UvSample, DiffError> {
    let c = tape.constant(coords.clone());
    let (texture, valid) = tape.bilinear_sample(albedo, c)?;
    Ok(UvSample { texture, valid })
}

/// `Δ` between the sampled albedo texture and `[T_A, flip(T_A)]` over valid
/// texels.
pub fn loss_symm<S: Real>(
    tape: &mut Tape<S>,
    mm: &Mismatch<'_, S>,
    sample: &UvSample,
    half_texture: Var,
) -> Result<Var, DiffError> {
    let flipped = tape.hflip(half_texture)?;
    let full = tape.concat_width(half_texture, flipped)?;
    mm.eval_valid(tape, sample.texture, full, &sample.valid)
}

/// Mean L1 between the sampled albedo texture and the fixed texture over
/// texels valid in both.
pub fn loss_cm<S: Real>(
    tape: &mut Tape<S>,
    sample: &UvSample,
    reference: &Tensor<S>,
    reference_valid: &[bool],
) -> Result<Var, DiffError> {
    let both: Vec<S> = sample
        .valid
        .iter()
        .zip(reference_valid)
        .map(|(&a, &b)| if a && b { S::one() } else { S::zero() })
        .collect();
    let n = both.iter().filter(|v| **v > S::zero()).count();
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }
    let (c, _, _) = reference.chw()?;
    // Invalid reference texels may hold NaN; zero them before subtracting.
    let cleaned = reference.map(|v| if v.is_finite() { v } else { S::zero() });
    let r = tape.constant(cleaned);
    let d = tape.sub(sample.texture, r)?;
    let d = tape.abs(d);
    let d = tape.mul_plane_const(d, &both)?;
    let s = tape.sum(d);
    Ok(tape.scale(s, S::one() / S::from_usize(c * n).expect("count")))
}

/// `Δ(N·m, N_gt·m)` over the face mask; 0 for an empty mask.
pub fn loss_normal<S: Real>(
    tape: &mut Tape<S>,
    mm: &Mismatch<'_, S>,
    normals: Var,
    reference: &Tensor<S>,
    face_mask: &[f32],
) -> Result<Var, DiffError> {
    let m: Vec<S> = face_mask.iter().map(|&v| S::from_f32(v).expect("finite")).collect();
    if m.iter().all(|v| *v == S::zero()) {
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }
    let gt = tape.constant(reference.clone());
    let a = tape.mul_plane_const(normals, &m)?;
    let b = tape.mul_plane_const(gt, &m)?;
    mm.eval(tape, a, b)
}

/// Term variables of one composite evaluation; absent terms are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TermVars {
    pub final_: Option<Var>,
    pub normal: Option<Var>,
    pub symm: Option<Var>,
    pub cm: Option<Var>,
    pub tv: Option<Var>,
    pub mask: Option<Var>,
}

/// Weighted total on the tape plus the term values.
pub fn composite<S: Real>(
    tape: &mut Tape<S>,
    terms: &TermVars,
    weights: &LossWeights,
) -> Result<(Var, LossTerms), DiffError> {
    let entries = [
        (1.0, terms.final_),
        (weights.normal, terms.normal),
        (weights.symm, terms.symm),
        (weights.cm, terms.cm),
        (weights.tv, terms.tv),
        (weights.mask, terms.mask),
    ];
    let mut weighted = Vec::new();
    for (w, v) in entries {
        if let Some(v) = v {
            weighted.push((S::lit(w), v));
        }
    }
    let total = if weighted.is_empty() {
        tape.constant(Tensor::scalar(S::zero()))
    } else {
        tape.weighted_sum(&weighted)?
    };
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().to_f64().unwrap_or(f64::NAN));
    let values = LossTerms {
        final_: value(terms.final_),
        normal: value(terms.normal),
        symm: value(terms.symm),
        cm: value(terms.cm),
        tv: value(terms.tv),
        mask: value(terms.mask),
    };
    Ok((total, values))
}
