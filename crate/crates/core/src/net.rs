//! The rendering network: a gated-convolution U-Net that consumes the
//! descriptor pyramid and emits albedo, normal, shadow and mask maps.
//!
//! Encoder level `l` works at `⌈H/2^l⌉×⌈W/2^l⌉` with `base·2^l` channels and
//! receives raw image `S[l]` concatenated to the pooled features while
//! `l ≤ T`. Decoder levels upsample (nearest), concatenate the encoder skip
//! and apply one gated 3×3 convolution. A 1×1 layer produces 8 channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{ConvSpec, DiffError, Padding, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::raster::RawImagePyramid;

/// Output channels of the final layer: albedo(3), normal(3), shadow, mask.
pub const HEAD_CHANNELS: usize = 8;
/// Normal used where the raw normal vector degenerates.
pub const FALLBACK_NORMAL: [f64; 3] = [0.0, 0.0, -1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Encoder levels.
    pub depth: usize,
    /// Highest raw-image level `T`; the network consumes `S[0..=T]`.
    pub levels: usize,
    pub descriptor_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 4,
            levels: 3,
            descriptor_width: 8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.descriptor_width == 0 {
            return Err(Error::invalid("base_channels and descriptor_width must be ≥ 1"));
        }
        if self.depth < self.levels + 1 {
            return Err(Error::invalid(format!(
                "depth {} cannot inject {} pyramid levels",
                self.depth,
                self.levels + 1
            )));
        }
        if self.depth > 12 {
            return Err(Error::invalid("depth above 12 is not supported"));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let gated = |out: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize| {
            for (suffix, shape) in [
                ("wf", vec![cout, cin, 3, 3]),
                ("bf", vec![cout]),
                ("wg", vec![cout, cin, 3, 3]),
                ("bg", vec![cout]),
            ] {
                out.push((format!("{name}.{suffix}"), shape));
            }
        };
        let l = self.descriptor_width;
        for lvl in 0..self.depth {
            let inject = if lvl <= self.levels { l } else { 0 };
            let cin = if lvl == 0 { l } else { self.channels(lvl - 1) + inject };
            gated(&mut out, format!("enc{lvl}"), cin, self.channels(lvl));
        }
        for lvl in (0..self.depth - 1).rev() {
            let cin = self.channels(lvl + 1) + self.channels(lvl);
            gated(&mut out, format!("dec{lvl}"), cin, self.channels(lvl));
        }
        out.push(("head.w".into(), vec![HEAD_CHANNELS, self.channels(0), 1, 1]));
        out.push(("head.b".into(), vec![HEAD_CHANNELS]));
        out
    }
}

/// Named parameter tensors in [`NetConfig::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    entries: Vec<(String, Tensor<f32>)>,
}

impl NetParams {
    pub fn from_entries(entries: Vec<(String, Tensor<f32>)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Verifies names, order, shapes and finiteness against `config`.
    pub fn check(&self, config: &NetConfig) -> Result<()> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "network expects {} tensors, got {}",
                layout.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), (have, t)) in layout.iter().zip(&self.entries) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {have} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::invalid(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Fan-in uniform initialization `U(±1/√fan_in)`, zero biases, and a
/// `-1` bias on the normal's z channel so initial normals face −z.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<NetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 4 {
                let bound = 1.0 / ((shape[1] * shape[2] * shape[3]) as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            } else if name == "head.b" {
                let mut b = vec![0.0; n];
                b[5] = -1.0;
                b
            } else {
                vec![0.0; n]
            };
            let t = Tensor::new(&shape, data).expect("layout shape");
            (name, t)
        })
        .collect();
    Ok(NetParams { entries })
}

/// Network outputs for one view, each as a planar image.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub albedo: Image,
    pub normals: Image,
    pub shadow: Image,
    pub mask: Image,
}

impl HeadMaps {
    pub fn height(&self) -> usize {
        self.albedo.height
    }

    pub fn width(&self) -> usize {
        self.albedo.width
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let ok = [(&self.albedo, 3), (&self.normals, 3), (&self.shadow, 1), (&self.mask, 1)]
            .iter()
            .all(|(img, c)| (img.channels, img.height, img.width) == (*c, h, w));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("head maps have inconsistent shapes"))
        }
    }

    /// World normal at pixel index `i`.
    pub fn normal(&self, i: usize) -> [f32; 3] {
        let hw = self.normals.plane_len();
        [self.normals.data[i], self.normals.data[hw + i], self.normals.data[2 * hw + i]]
    }
}

/// Network parameters placed on a tape, in layout order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Wraps tape variables given in [`NetConfig::layout`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Head outputs as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub albedo: Var,
    pub normals: Var,
    pub shadow: Var,
    pub mask: Var,
}

impl HeadVars {
    pub fn to_maps<S: Real>(&self, tape: &Tape<S>) -> Result<HeadMaps> {
        Ok(HeadMaps {
            albedo: Image::from_tensor(tape.value(self.albedo))?,
            normals: Image::from_tensor(tape.value(self.normals))?,
            shadow: Image::from_tensor(tape.value(self.shadow))?,
            mask: Image::from_tensor(tape.value(self.mask))?,
        })
    }
}

/// Records `params` as tape leaves, learnable when `trainable`.
pub fn params_on_tape<S: Real>(tape: &mut Tape<S>, params: &NetParams, trainable: bool) -> ParamVars {
    let vars = params
        .entries
        .iter()
        .map(|(_, t)| {
            let v = t.cast::<S>();
            if trainable {
                tape.param(v)
            } else {
                tape.constant(v)
            }
        })
        .collect();
    ParamVars { vars }
}

/// Runs the network on raw images `raws[t]` (L×H_t×W_t, `t = 0..=T`).
pub fn forward_on_tape<S: Real>(
    tape: &mut Tape<S>,
    config: &NetConfig,
    params: &ParamVars,
    raws: &[Var],
) -> Result<HeadVars, DiffError> {
    if raws.len() != config.levels + 1 {
        return Err(DiffError::Shape(format!(
            "network consumes {} raw images, got {}",
            config.levels + 1,
            raws.len()
        )));
    }
    if params.vars.len() != config.layout().len() {
        return Err(DiffError::Shape("parameter count does not match network".into()));
    }
    let (_, h0, w0) = tape.value(raws[0]).chw()?;
    for (t, &r) in raws.iter().enumerate() {
        let (c, h, w) = tape.value(r).chw()?;
        let expect = (h0.div_ceil(1 << t), w0.div_ceil(1 << t));
        if c != config.descriptor_width || (h, w) != expect {
            return Err(DiffError::Shape(format!(
                "raw image {t} is {c}×{h}×{w}, expected {}×{}×{}",
                config.descriptor_width, expect.0, expect.1
            )));
        }
    }
    let spec3 = ConvSpec::same(3, Padding::Replicate);
    let mut next = params.vars.iter().copied();
    let mut take_gated = || {
        let v: Vec<Var> = next.by_ref().take(4).collect();
        ((v[0], v[1]), (v[2], v[3]))
    };

    let mut skips = Vec::with_capacity(config.depth);
    let mut x = raws[0];
    for lvl in 0..config.depth {
        if lvl > 0 {
            let pooled = tape.avg_pool(x, 2)?;
            x = match raws.get(lvl) {
                Some(&raw) => tape.concat_channels(&[pooled, raw])?,
                None => pooled,
            };
        }
        let (f, g) = take_gated();
        x = tape.gated_conv(x, f, g, spec3)?;
        skips.push(x);
    }
    for lvl in (0..config.depth - 1).rev() {
        let skip = skips[lvl];
        let (_, h, w) = tape.value(skip).chw()?;
        let up = tape.upsample2(x, h, w)?;
        let cat = tape.concat_channels(&[up, skip])?;
        let (f, g) = take_gated();
        x = tape.gated_conv(cat, f, g, spec3)?;
    }
    let rest: Vec<Var> = next.collect();
    let out = tape.conv2d(x, rest[0], rest[1], ConvSpec::same(1, Padding::Zero))?;

    let albedo = tape.slice_channels(out, 0, 3)?;
    let albedo = tape.sigmoid(albedo);
    let normals = tape.slice_channels(out, 3, 3)?;
    let fallback = FALLBACK_NORMAL.map(S::lit);
    let normals = tape.normalize_vectors(normals, fallback)?;
    let shadow = tape.slice_channels(out, 6, 1)?;
    let shadow = tape.sigmoid(shadow);
    let mask = tape.slice_channels(out, 7, 1)?;
    let mask = tape.sigmoid(mask);
    Ok(HeadVars {
        albedo,
        normals,
        shadow,
        mask,
    })
}

/// Inference-only forward pass in single precision.
pub fn forward(config: &NetConfig, params: &NetParams, pyramid: &RawImagePyramid) -> Result<HeadMaps> {
    params.check(config)?;
    if pyramid.levels.len() != config.levels + 1 {
        return Err(Error::invalid(format!(
            "pyramid has {} levels, network consumes {}",
            pyramid.levels.len(),
            config.levels + 1
        )));
    }
    let mut tape = Tape::<f32>::new();
    let pv = params_on_tape(&mut tape, params, false);
    let raws: Vec<Var> = pyramid
        .levels
        .iter()
        .map(|r| tape.constant(r.to_tensor()))
        .collect();
    let heads = forward_on_tape(&mut tape, config, &pv, &raws)?;
    heads.to_maps(&tape)
}
