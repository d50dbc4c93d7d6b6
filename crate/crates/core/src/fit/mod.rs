//! Scene fitting: Adam over network weights, point descriptors, light
//! colors and the albedo half-texture, one random view patch per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lighting::{compose_on_tape, Flash, FlashRays, LightingOptions};
use crate::losses::{
    composite, loss_cm, loss_final, loss_mask, loss_normal, loss_symm, loss_tv, sample_uv, LossReport,
    LossWeights, Mismatch, SobelPyramid, TermVars,
};
use crate::net::{forward_on_tape, init_params, params_on_tape, NetConfig};
use crate::raster::{coverage, gather_on_tape, DEFAULT_Z_NEAR};
use crate::scene::{
    flash_distance, Camera, DescriptorSet, Frame, LightColors, PointCloud, SceneModel, Split, HALF_TEX_WIDTH,
    UV_SIZE,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which median texture seeds the albedo half-texture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TexInit {
    Flash,
    Nonflash,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: u64,
    /// Square patch side in pixels.
    pub patch: usize,
    pub lr_net: f64,
    pub lr_desc: f64,
    pub lr_lights: f64,
    pub lr_tex: f64,
    pub adam: AdamParams,
    pub zoom: [f64; 2],
    pub seed: u64,
    pub weights: LossWeights,
    /// Evaluate held-out frames every this many steps (0 disables).
    pub validation_every: u64,
    pub init_tex: TexInit,
    pub net: NetConfig,
    pub desc_init_std: f64,
    pub z_near: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            patch: 128,
            lr_net: 1e-4,
            lr_desc: 1e-4,
            lr_lights: 1e-2,
            lr_tex: 1e-3,
            adam: AdamParams::default(),
            zoom: [0.8, 1.2],
            seed: 0,
            weights: LossWeights::default(),
            validation_every: 0,
            init_tex: TexInit::Flash,
            net: NetConfig::default(),
            desc_init_std: 0.1,
            z_near: DEFAULT_Z_NEAR,
        }
    }
}

impl FitConfig {
    /// Full-scale schedule: 80k steps on 512-pixel patches.
    pub fn full_scale() -> Self {
        Self {
            steps: 80_000,
            patch: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be ≥ 1"));
        }
        if self.patch == 0 {
            return Err(Error::invalid("patch must be ≥ 1"));
        }
        let lrs = [self.lr_net, self.lr_desc, self.lr_lights, self.lr_tex];
        if lrs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("learning rates must be finite and ≥ 0"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid("Adam needs β1, β2 in [0, 1) and ε > 0"));
        }
        let [lo, hi] = self.zoom;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("zoom range must satisfy 0 < lo ≤ hi"));
        }
        if !(self.desc_init_std >= 0.0 && self.desc_init_std.is_finite()) {
            return Err(Error::invalid("descriptor init std must be finite and ≥ 0"));
        }
        if !(self.z_near > 0.0) {
            return Err(Error::invalid("z_near must be > 0"));
        }
        self.weights.validate().map_err(Error::Invalid)?;
        self.net.validate()
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at 1-based step `t`.
pub fn adam_step<S: Real>(param: &mut [S], grad: &[S], m: &mut [S], v: &mut [S], t: u64, lr: f64, hp: &AdamParams) {
    assert!(t >= 1, "Adam steps are 1-based");
    assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let (b1, b2) = (S::lit(hp.beta1), S::lit(hp.beta2));
    let bc1 = S::lit(1.0 - hp.beta1.powf(t as f64));
    let bc2 = S::lit(1.0 - hp.beta2.powf(t as f64));
    let (lr, eps) = (S::lit(lr), S::lit(hp.eps));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (S::one() - b1) * g;
        v[i] = b2 * v[i] + (S::one() - b2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Optimizer state: step counter and moments per named parameter tensor.
/// Names are the network layout names followed by `descriptors`, `room`,
/// `flash` and `texture`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<(String, Moments)>,
}

impl AdamState {
    fn fresh(model: &SceneModel) -> Self {
        let mut moments: Vec<(String, Moments)> = model
            .net_params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), Moments::zeros(t.len())))
            .collect();
        moments.push(("descriptors".into(), Moments::zeros(model.descriptors.values().len())));
        moments.push(("room".into(), Moments::zeros(3)));
        moments.push(("flash".into(), Moments::zeros(3)));
        moments.push(("texture".into(), Moments::zeros(model.albedo_halftex.data.len())));
        Self { t: 0, moments }
    }

    fn check(&self, model: &SceneModel) -> Result<()> {
        let want = Self::fresh(model);
        let same = want.moments.len() == self.moments.len()
            && want.moments.iter().zip(&self.moments).all(|((wn, wm), (n, m))| {
                wn == n && wm.m.len() == m.m.len() && wm.v.len() == m.v.len()
            });
        if !same {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        if self.t != model.trained_steps {
            return Err(Error::invalid("optimizer step differs from the model's trained steps"));
        }
        Ok(())
    }
}

/// Everything needed to continue a fit bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SceneModel,
    pub adam: AdamState,
}

/// Per-texel median of view projections into the UV chart.
#[derive(Clone, Debug, PartialEq)]
pub struct MedianTexture {
    /// 3×256×256.
    pub texture: Image,
    /// Number of views that saw each texel.
    pub counts: Vec<u32>,
}

impl MedianTexture {
    pub fn is_valid(&self, texel: usize) -> bool {
        self.counts[texel] > 0
    }

    pub fn valid(&self) -> Vec<bool> {
        self.counts.iter().map(|c| *c > 0).collect()
    }
}

/// Bilinear lookup at `(x, y)` inside `[0, W-1]×[0, H-1]`, `None` outside.
fn bilinear(img: &Image, c: usize, x: f64, y: f64) -> Option<f32> {
    let (w, h) = (img.width, img.height);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let p = img.plane(c);
    let at = |yy: usize, xx: usize| p[yy * w + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

/// Projects a frame's image into the UV chart through its posmap.
pub fn project_texture(frame: &Frame) -> Option<(Vec<[f32; 3]>, Vec<bool>)> {
    let pm = frame.posmap.as_ref()?;
    let n = UV_SIZE * UV_SIZE;
    let mut vals = vec![[0.0f32; 3]; n];
    let mut ok = vec![false; n];
    for (t, c) in pm.coords().iter().enumerate() {
        if c[0].is_nan() {
            continue;
        }
        let mut px = [0.0f32; 3];
        let mut inside = true;
        for (ch, slot) in px.iter_mut().enumerate() {
            match bilinear(&frame.image, ch, c[0] as f64, c[1] as f64) {
                Some(v) => *slot = v,
                None => inside = false,
            }
        }
        if inside {
            vals[t] = px;
            ok[t] = true;
        }
    }
    Some((vals, ok))
}

fn median_of(v: &mut [f32]) -> f32 {
    v.sort_unstable_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Component-wise median over frames that see each texel. Even counts take
/// the mean of the two middle values.
pub fn median_texture(frames: &[&Frame]) -> Result<MedianTexture> {
    let projections: Vec<_> = frames.iter().filter_map(|f| project_texture(f)).collect();
    if projections.is_empty() {
        return Err(Error::invalid("median texture needs at least one frame with a posmap"));
    }
    let n = UV_SIZE * UV_SIZE;
    let mut texture = Image::zeros(3, UV_SIZE, UV_SIZE);
    let mut counts = vec![0u32; n];
    let mut buf = Vec::with_capacity(projections.len());
    for t in 0..n {
        for c in 0..3 {
            buf.clear();
            buf.extend(projections.iter().filter(|(_, ok)| ok[t]).map(|(v, _)| v[t][c]));
            if buf.is_empty() {
                continue;
            }
            counts[t] = buf.len() as u32;
            texture.data[c * n + t] = median_of(&mut buf);
        }
    }
    Ok(MedianTexture { texture, counts })
}

/// Left half of the chart averaged with the mirrored right half; one valid
/// side is copied, no valid side gives 0.5.
pub fn init_half_texture(med: &MedianTexture) -> Image {
    let mut out = Image::zeros(3, UV_SIZE, HALF_TEX_WIDTH);
    let n = UV_SIZE * UV_SIZE;
    for i in 0..UV_SIZE {
        for j in 0..HALF_TEX_WIDTH {
            let l = i * UV_SIZE + j;
            let r = i * UV_SIZE + UV_SIZE - 1 - j;
            for c in 0..3 {
                let (a, b) = (med.texture.data[c * n + l], med.texture.data[c * n + r]);
                let v = match (med.is_valid(l), med.is_valid(r)) {
                    (true, true) => 0.5 * (a + b),
                    (true, false) => a,
                    (false, true) => b,
                    (false, false) => 0.5,
                };
                out.set(c, i, j, v);
            }
        }
    }
    out
}

/// A training patch cut from a zoomed frame.
#[derive(Clone, Debug)]
pub struct Patch {
    /// Camera that renders exactly the patch window.
    pub camera: Camera,
    pub zoom: f64,
    pub x0: i64,
    pub y0: i64,
    pub image: Image,
    pub mask: Image,
    /// Face-region normals, zero outside the region.
    pub face_normals: Option<Image>,
    /// UV→patch coordinates (256×256×2); texels outside the patch hold NaN.
    pub uv_coords: Option<Tensor<f32>>,
}

/// Bilinear resample of the zoomed window; samples beyond half a pixel
/// outside the source are zero.
fn resample(img: &Image, zoom: f64, x0: i64, y0: i64, size: usize, nearest: bool) -> Image {
    let (w, h) = (img.width as f64, img.height as f64);
    let mut out = Image::zeros(img.channels, size, size);
    for i in 0..size {
        let sy = (y0 + i as i64) as f64 / zoom;
        for j in 0..size {
            let sx = (x0 + j as i64) as f64 / zoom;
            if sx < -0.5 || sy < -0.5 || sx >= w - 0.5 || sy >= h - 0.5 {
                continue;
            }
            for c in 0..img.channels {
                let v = if nearest {
                    img.at(c, (sy + 0.5).floor() as usize, (sx + 0.5).floor() as usize)
                } else {
                    bilinear(img, c, sx.clamp(0.0, w - 1.0), sy.clamp(0.0, h - 1.0)).unwrap_or(0.0)
                };
                out.set(c, i, j, v);
            }
        }
    }
    out
}

/// Zooms the frame by `zoom` and cuts a `size`² window centred on a
/// uniformly chosen foreground pixel.
pub fn sample_patch(frame: &Frame, size: usize, zoom: f64, rng: &mut impl Rng) -> Result<Patch> {
    if !(zoom > 0.0 && zoom.is_finite()) {
        return Err(Error::invalid("zoom must be positive"));
    }
    let fg: Vec<usize> = (0..frame.mask.plane_len()).filter(|&i| frame.mask.data[i] > 0.5).collect();
    if fg.is_empty() {
        return Err(Error::invalid("frame mask is empty"));
    }
    let pick = fg[rng.gen_range(0..fg.len())];
    let (px, py) = ((pick % frame.mask.width) as f64, (pick / frame.mask.width) as f64);
    let half = size as f64 / 2.0;
    let x0 = (px * zoom - half).round() as i64;
    let y0 = (py * zoom - half).round() as i64;
    Ok(cut_patch(frame, size, zoom, x0, y0))
}

/// The patch at an explicit window of the zoomed frame.
pub fn cut_patch(frame: &Frame, size: usize, zoom: f64, x0: i64, y0: i64) -> Patch {
    let camera = frame.camera.scaled(zoom).cropped(x0, y0, size, size);
    let uv_coords = frame.posmap.as_ref().map(|pm| {
        let lim = (size - 1) as f64;
        let mut data = Vec::with_capacity(UV_SIZE * UV_SIZE * 2);
        for c in pm.transformed(zoom, x0 as f64, y0 as f64) {
            if c[0] >= 0.0 && c[1] >= 0.0 && c[0] <= lim && c[1] <= lim {
                data.extend([c[0] as f32, c[1] as f32]);
            } else {
                data.extend([f32::NAN; 2]);
            }
        }
        Tensor::new(&[UV_SIZE, UV_SIZE, 2], data).expect("chart shape")
    });
    Patch {
        camera,
        zoom,
        x0,
        y0,
        image: resample(&frame.image, zoom, x0, y0, size, false),
        mask: resample(&frame.mask, zoom, x0, y0, size, false),
        face_normals: frame.face_normals.as_ref().map(|n| resample(n, zoom, x0, y0, size, true)),
        uv_coords,
    }
}

fn face_mask_of(normals: &Image) -> Vec<f32> {
    let hw = normals.plane_len();
    (0..hw)
        .map(|i| {
            let nz = (0..3).any(|c| normals.data[c * hw + i] != 0.0);
            if nz {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Stateful fitting loop over a fixed frame set.
pub struct Fitter<'a> {
    config: FitConfig,
    frames: &'a [Frame],
    train: Vec<usize>,
    /// Flash distance per frame; 0 for frames without flash.
    distances: Vec<f64>,
    /// Color-matching reference (flash median texture) and its validity.
    reference: Option<(Tensor<f32>, Vec<bool>)>,
    model: SceneModel,
    adam: AdamState,
}

impl<'a> Fitter<'a> {
    /// Initializes a fresh model from `cloud` and the training frames.
    pub fn new(cloud: PointCloud, frames: &'a [Frame], config: FitConfig) -> Result<Self> {
        let (train, distances) = Self::prepare(&cloud, frames, &config)?;
        let train_frames: Vec<&Frame> = train.iter().map(|&i| &frames[i]).collect();
        let flash_frames: Vec<&Frame> = train_frames.iter().copied().filter(|f| f.flash).collect();
        let plain_frames: Vec<&Frame> = train_frames.iter().copied().filter(|f| !f.flash).collect();
        let has_posmaps = train_frames.iter().any(|f| f.posmap.is_some());

        let albedo_halftex = if has_posmaps {
            let source = match config.init_tex {
                TexInit::Flash => &flash_frames,
                TexInit::Nonflash => &plain_frames,
            };
            init_half_texture(&median_texture(source)?)
        } else {
            Image::filled(3, UV_SIZE, HALF_TEX_WIDTH, 0.5)
        };

        let net_params = init_params(&config.net, config.seed)?;
        let l = config.net.descriptor_width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6465_7363);
        let normal = Normal::new(0.0f32, config.desc_init_std as f32).map_err(|e| Error::invalid(e.to_string()))?;
        let values: Vec<f32> = (0..cloud.len() * l).map(|_| normal.sample(&mut rng)).collect();
        let descriptors = DescriptorSet::new(l, values)?;

        let flash_d: Vec<f64> = distances.iter().copied().filter(|d| *d > 0.0).collect();
        let d = if flash_d.is_empty() { 1.0 } else { flash_d.iter().sum::<f64>() / flash_d.len() as f64 };
        let lights = LightColors {
            room: [0.5; 3],
            flash: [(0.5 * d * d) as f32; 3],
        };

        let model = SceneModel {
            cloud,
            descriptors,
            net_config: config.net,
            net_params,
            lights,
            albedo_halftex,
            trained_steps: 0,
        };
        model.validate()?;
        let adam = AdamState::fresh(&model);
        let reference = Self::reference(&flash_frames)?;
        Ok(Self {
            config,
            frames,
            train,
            distances,
            reference,
            model,
            adam,
        })
    }

    /// Continues from a checkpoint.
    pub fn resume(checkpoint: Checkpoint, frames: &'a [Frame], config: FitConfig) -> Result<Self> {
        let Checkpoint { model, adam } = checkpoint;
        model.validate()?;
        if model.net_config != config.net {
            return Err(Error::invalid("checkpoint network differs from the config"));
        }
        adam.check(&model)?;
        let (train, distances) = Self::prepare(&model.cloud, frames, &config)?;
        let flash_frames: Vec<&Frame> = train.iter().map(|&i| &frames[i]).filter(|f| f.flash).collect();
        let reference = Self::reference(&flash_frames)?;
        Ok(Self {
            config,
            frames,
            train,
            distances,
            reference,
            model,
            adam,
        })
    }

    fn prepare(cloud: &PointCloud, frames: &[Frame], config: &FitConfig) -> Result<(Vec<usize>, Vec<f64>)> {
        config.validate()?;
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let train: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].split == Split::Train).collect();
        if train.is_empty() {
            return Err(Error::invalid("no training frames"));
        }
        let mut distances = vec![0.0; frames.len()];
        for (i, f) in frames.iter().enumerate() {
            f.validate()?;
            if f.split != Split::Train {
                continue;
            }
            if config.patch > f.camera.width.min(f.camera.height) {
                return Err(Error::invalid(format!(
                    "patch {} exceeds the {}×{} frame {i}",
                    config.patch, f.camera.width, f.camera.height
                )));
            }
            if f.flash {
                let d = flash_distance(&f.camera, cloud)?;
                if !(d > 0.0) {
                    return Err(Error::invalid(format!("frame {i} has zero flash distance")));
                }
                distances[i] = d;
            }
        }
        Ok((train, distances))
    }

    fn reference(flash_frames: &[&Frame]) -> Result<Option<(Tensor<f32>, Vec<bool>)>> {
        if !flash_frames.iter().any(|f| f.posmap.is_some()) {
            return Ok(None);
        }
        let med = median_texture(flash_frames)?;
        let valid = med.valid();
        Ok(Some((med.texture.to_tensor(), valid)))
    }

    pub fn model(&self) -> &SceneModel {
        &self.model
    }

    pub fn into_model(self) -> SceneModel {
        self.model
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn steps_done(&self) -> u64 {
        self.adam.t
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Patch drawn at `step` (1-based); depends only on the seed and step.
    pub fn patch_for_step(&self, step: u64) -> Result<(usize, Patch)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        let fi = self.train[rng.gen_range(0..self.train.len())];
        let [lo, hi] = self.config.zoom;
        let zoom = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let patch = sample_patch(&self.frames[fi], self.config.patch, zoom, &mut rng)?;
        Ok((fi, patch))
    }

    /// One forward/backward pass and Adam update.
    pub fn step(&mut self) -> Result<LossReport> {
        let step = self.adam.t + 1;
        let (fi, patch) = self.patch_for_step(step)?;
        let frame = &self.frames[fi];
        let cfg = &self.config;
        let model = &self.model;

        let mut tape = Tape::<f32>::new();
        let pv = params_on_tape(&mut tape, &model.net_params, true);
        let (n, l) = (model.cloud.len(), model.descriptors.width());
        let desc = tape.param(Tensor::new(&[n, l], model.descriptors.values().to_vec())?);
        let room = tape.param(Tensor::new(&[3], model.lights.room.to_vec())?);
        let flash_c = tape.param(Tensor::new(&[3], model.lights.flash.to_vec())?);
        let tex = tape.param(model.albedo_halftex.to_tensor());

        let mut raws = Vec::with_capacity(cfg.net.levels + 1);
        for t in 0..=cfg.net.levels {
            let cov = coverage(&model.cloud, &patch.camera.level(t), cfg.z_near);
            raws.push(gather_on_tape(&mut tape, desc, &cov)?);
        }
        let heads = forward_on_tape(&mut tape, &cfg.net, &pv, &raws)?;
        let flash = frame.flash.then(|| Flash {
            distance: self.distances[fi],
            rays: FlashRays::for_camera(&patch.camera, false),
        });
        let rendered = compose_on_tape(&mut tape, &heads, room, flash_c, flash.as_ref(), &LightingOptions::default())?;

        let sobel = SobelPyramid;
        let mm = Mismatch::new(&cfg.weights, &sobel);
        let mut terms = TermVars::default();
        let target = tape.constant(patch.image.to_tensor());
        terms.final_ = Some(loss_final(&mut tape, &mm, rendered, target, &patch.mask.data)?);
        let gt_mask = tape.constant(patch.mask.to_tensor());
        terms.mask = Some(loss_mask(&mut tape, heads.mask, gt_mask)?);
        terms.tv = Some(loss_tv(&mut tape, heads.shadow)?);
        if let Some(fnorm) = &patch.face_normals {
            let fm = face_mask_of(fnorm);
            terms.normal = Some(loss_normal(&mut tape, &mm, heads.normals, &fnorm.to_tensor(), &fm)?);
        }
        if let Some(coords) = &patch.uv_coords {
            let sample = sample_uv(&mut tape, heads.albedo, coords)?;
            terms.symm = Some(loss_symm(&mut tape, &mm, &sample, tex)?);
            if let Some((reference, valid)) = &self.reference {
                terms.cm = Some(loss_cm(&mut tape, &sample, reference, valid)?);
            }
        }
        let (total, values) = composite(&mut tape, &terms, &cfg.weights)?;
        let report = LossReport::new(step, values, &cfg.weights);
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite { term, step });
        }
        let grads = tape.backward(total)?;

        let hp = cfg.adam;
        let (lr_net, lr_desc, lr_lights, lr_tex) = (cfg.lr_net, cfg.lr_desc, cfg.lr_lights, cfg.lr_tex);
        let mut moments = self.adam.moments.iter_mut().map(|(_, m)| m);
        let model = &mut self.model;
        for (var, param) in pv.vars().iter().zip(model.net_params.tensors_mut()) {
            let g = grads.get_or_zeros(*var, param.shape());
            let m = moments.next().expect("moment per tensor");
            adam_step(param.data_mut(), g.data(), &mut m.m, &mut m.v, step, lr_net, &hp);
        }
        let g = grads.get_or_zeros(desc, &[n, l]);
        let m = moments.next().expect("descriptor moments");
        adam_step(model.descriptors.values_mut(), g.data(), &mut m.m, &mut m.v, step, lr_desc, &hp);
        for (var, dst) in [(room, &mut model.lights.room), (flash_c, &mut model.lights.flash)] {
            let g = grads.get_or_zeros(var, &[3]);
            let m = moments.next().expect("light moments");
            adam_step(&mut dst[..], g.data(), &mut m.m, &mut m.v, step, lr_lights, &hp);
        }
        model.lights.clamp_nonnegative();
        let g = grads.get_or_zeros(tex, &[3, UV_SIZE, HALF_TEX_WIDTH]);
        let m = moments.next().expect("texture moments");
        adam_step(&mut model.albedo_halftex.data, g.data(), &mut m.m, &mut m.v, step, lr_tex, &hp);

        self.adam.t = step;
        model.trained_steps = step;
        Ok(report)
    }

    /// Runs `steps` updates, calling `observe` after each.
    pub fn run(
        &mut self,
        steps: u64,
        mut observe: impl FnMut(&LossReport, &Self) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.step()?;
            observe(&r, self)?;
            reports.push(r);
        }
        Ok(reports)
    }
}

/// Fits a fresh model for `config.steps` steps.
pub fn fit(cloud: PointCloud, frames: &[Frame], config: FitConfig) -> Result<(SceneModel, Vec<LossReport>)> {
    let steps = config.steps;
    let mut fitter = Fitter::new(cloud, frames, config)?;
    let reports = fitter.run(steps, |_, _| Ok(()))?;
    Ok((fitter.into_model(), reports))
}

/// Trailing moving average; entry `i` averages `values[i+1-window..=i]`
/// and is only produced once a full window is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut acc: f64 = values[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..values.len() {
        acc += values[i] - values[i - window];
        out.push(acc / window as f64);
    }
    out
}
