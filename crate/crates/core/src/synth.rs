//! Analytic ground-truth scene: a textured sphere lit by a smooth room
//! light plus an optional camera flash, rendered by exact ray casting.
//!
//! World axes: `+y` points down, the sphere's front faces `−z` and the
//! albedo is mirror-symmetric across the plane `x = center.x`.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lighting::{compose_original, Flash, FlashRays, LightingOptions, LightingSpec};
use crate::net::HeadMaps;
use crate::render::{flash_for, render_heads, shade, RenderOptions};
use crate::scene::{view_axis, Camera, Frame, LightColors, PointCloud, Posmap, SceneModel, Split, UV_SIZE};

/// Latitude half-range of the UV chart.
pub const CHART_LAT: f64 = std::f64::consts::FRAC_PI_3;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub radius: f64,
    pub center: [f64; 3],
    pub points: usize,
    pub room: [f32; 3],
    pub flash: [f32; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            center: [0.0; 3],
            points: 50_000,
            room: [0.7, 0.65, 0.6],
            flash: [2.0, 1.9, 1.8],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub radius: f64,
    pub center: Vector3<f64>,
    pub lights: LightColors,
    /// Direction the room light travels (unit).
    pub room_light: Vector3<f64>,
    pub cloud: PointCloud,
}

/// Samples `config.points` area-uniform surface points.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    if !(config.radius > 0.0) || config.points == 0 {
        return Err(Error::invalid("sphere needs a positive radius and at least one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = Vector3::from(config.center);
    let mut pts = Vec::with_capacity(config.points);
    while pts.len() < config.points {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n < 1e-9 {
            continue;
        }
        let p = center + v * (config.radius / n);
        pts.push([p.x as f32, p.y as f32, p.z as f32]);
    }
    Ok(SyntheticScene {
        radius: config.radius,
        center,
        lights: LightColors {
            room: config.room,
            flash: config.flash,
        },
        room_light: Vector3::new(0.55, 0.5, 0.65).normalize(),
        cloud: PointCloud::new(pts)?,
    })
}

impl SyntheticScene {
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center) / self.radius
    }

    /// `(longitude, latitude)` of the outward normal; longitude 0 faces −z,
    /// latitude is positive upwards.
    pub fn lon_lat(n: &Vector3<f64>) -> (f64, f64) {
        (n.x.atan2(-n.z), (-n.y).clamp(-1.0, 1.0).asin())
    }

    /// Unit normal at chart coordinates.
    pub fn from_lon_lat(lon: f64, lat: f64) -> Vector3<f64> {
        Vector3::new(lat.cos() * lon.sin(), -lat.sin(), -lat.cos() * lon.cos())
    }

    /// Soft checker plus a vertical gradient; depends on `|lon|` only.
    pub fn albedo(&self, n: &Vector3<f64>) -> [f64; 3] {
        let (lon, lat) = Self::lon_lat(n);
        let check = 0.5 + 0.5 * (4.0 * (6.0 * lon.abs()).sin() * (6.0 * lat).sin()).tanh();
        let g = 0.5 + lat / std::f64::consts::PI;
        [
            0.15 + 0.55 * check + 0.1 * g,
            0.12 + 0.45 * check + 0.2 * g,
            0.1 + 0.4 * check + 0.25 * (1.0 - g),
        ]
    }

    /// Room shading in `[0.3, 0.9]`, lit from the upper left.
    pub fn shading(&self, n: &Vector3<f64>) -> f64 {
        0.3 + 0.6 * 0.5 * (1.0 - n.dot(&self.room_light))
    }

    /// Nearest intersection of the ray `o + t·d` (unit `d`) with the sphere.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Vector3<f64>> {
        let oc = o - self.center;
        let b = oc.dot(d);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let t = if -b - s > 0.0 { -b - s } else { -b + s };
        (t > 0.0).then(|| o + d * t)
    }

    /// Analytic flash distance `|camera − center| − r`.
    pub fn flash_distance(&self, camera: &Camera) -> f64 {
        (camera.center() - self.center).norm() - self.radius
    }

    /// Exact per-pixel render with ground-truth maps, posmap and face normals.
    pub fn render_oracle(&self, camera: &Camera, flash: bool) -> Frame {
        let (w, h) = (camera.width, camera.height);
        let hw = w * h;
        let origin = camera.center();
        let axis = view_axis(camera);
        let d = self.flash_distance(camera);
        let mut image = Image::zeros(3, h, w);
        let mut heads = HeadMaps {
            albedo: Image::zeros(3, h, w),
            normals: Image::zeros(3, h, w),
            shadow: Image::zeros(1, h, w),
            mask: Image::zeros(1, h, w),
        };
        let mut face = Image::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let ray = camera.pixel_ray(x as f64, y as f64);
                let Some(p) = self.intersect(&origin, &ray) else { continue };
                let n = self.normal(&p);
                let rho = self.albedo(&n);
                let s = self.shading(&n);
                let cos = (-n.dot(&axis)).max(0.0);
                for c in 0..3 {
                    let mut v = rho[c] * self.lights.room[c] as f64 * s;
                    if flash {
                        v += rho[c] * self.lights.flash[c] as f64 / (d * d) * cos;
                    }
                    image.data[c * hw + i] = v as f32;
                    heads.albedo.data[c * hw + i] = rho[c] as f32;
                    heads.normals.data[c * hw + i] = n[c] as f32;
                }
                heads.shadow.data[i] = s as f32;
                heads.mask.data[i] = 1.0;
                let (lon, lat) = Self::lon_lat(&n);
                if lon.abs() <= std::f64::consts::FRAC_PI_2 && lat.abs() <= CHART_LAT {
                    for c in 0..3 {
                        face.data[c * hw + i] = n[c] as f32;
                    }
                }
            }
        }
        Frame {
            image,
            mask: heads.mask.clone(),
            camera: camera.clone(),
            flash,
            posmap: Some(self.posmap(camera)),
            face_normals: Some(face),
            ground_truth: Some(heads),
            split: Split::Train,
        }
    }

    /// UV chart: column `j` spans longitude −90°…90°, row `i` spans latitude
    /// +60°…−60°. Mirrored columns map to mirrored surface points. A texel is
    /// valid when its point faces the camera and projects inside the image.
    pub fn posmap(&self, camera: &Camera) -> Posmap {
        let origin = camera.center();
        let mut coords = Vec::with_capacity(UV_SIZE * UV_SIZE);
        for i in 0..UV_SIZE {
            let lat = CHART_LAT * (1.0 - 2.0 * (i as f64 + 0.5) / UV_SIZE as f64);
            for j in 0..UV_SIZE {
                let lon = std::f64::consts::PI * ((j as f64 + 0.5) / UV_SIZE as f64 - 0.5);
                let n = Self::from_lon_lat(lon, lat);
                let p = self.center + n * self.radius;
                let facing = n.dot(&(origin - p)) > 0.0;
                let (u, v, z) = crate::scene::project_point(camera, &p);
                let inside = z > 0.0
                    && u >= 0.0
                    && v >= 0.0
                    && u <= (camera.width - 1) as f64
                    && v <= (camera.height - 1) as f64;
                coords.push(if facing && inside { [u as f32, v as f32] } else { [f32::NAN; 2] });
            }
        }
        Posmap::new(coords).expect("chart size")
    }
}

/// Camera on a circle around the y axis looking at `target`.
/// `azimuth = 0` sits on the `−z` side; positive azimuth moves towards `+x`.
pub fn orbit_camera(
    target: Vector3<f64>,
    azimuth: f64,
    elevation: f64,
    distance: f64,
    focal: f64,
    width: usize,
    height: usize,
) -> Result<Camera> {
    let forward = Vector3::new(
        -azimuth.sin() * elevation.cos(),
        elevation.sin(),
        azimuth.cos() * elevation.cos(),
    );
    let position = target - forward * distance;
    look_at(position, target, focal, width, height)
}

/// Pinhole camera at `position` looking at `target` with image rows
/// pointing down `+y`.
pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, focal: f64, width: usize, height: usize) -> Result<Camera> {
    let forward = (target - position).normalize();
    let mut down = Vector3::y() - forward * forward.y;
    if down.norm() < 1e-9 {
        down = Vector3::z() - forward * forward.z;
    }
    let down = down.normalize();
    let right = down.cross(&forward);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * position);
    Camera::new(
        focal,
        focal,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        rotation,
        translation,
        width,
        height,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub views: usize,
    pub flash_every: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub distance: f64,
    /// Maximum random elevation offset in degrees.
    pub elevation_jitter_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            views: 100,
            flash_every: 5,
            width: 160,
            height: 160,
            focal: 180.0,
            distance: 3.0,
            elevation_jitter_deg: 0.0,
        }
    }
}

/// Held-out view indices: every second flash view starting at
/// `flash_every`, together with its two neighbours.
pub fn validation_indices(views: usize, flash_every: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if flash_every == 0 {
        return out;
    }
    let mut center = flash_every;
    while center < views {
        for i in [center.wrapping_sub(1), center, center + 1] {
            if i < views && !out.contains(&i) {
                out.push(i);
            }
        }
        center += 2 * flash_every;
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub frames: Vec<Frame>,
    pub cloud: PointCloud,
}

/// Views on a half circle (azimuth −90°…90°), flash on every
/// `flash_every`-th view starting with the first.
pub fn make_dataset(scene: &SyntheticScene, config: &DatasetConfig, seed: u64) -> Result<SyntheticDataset> {
    if config.views < 2 || config.flash_every == 0 {
        return Err(Error::invalid("need at least two views and flash_every ≥ 1"));
    }
    if config.distance <= scene.radius {
        return Err(Error::invalid("cameras must sit outside the sphere"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let val = validation_indices(config.views, config.flash_every);
    let mut frames = Vec::with_capacity(config.views);
    for i in 0..config.views {
        let az = (-90.0 + 180.0 * i as f64 / (config.views - 1) as f64).to_radians();
        let jitter = if config.elevation_jitter_deg > 0.0 {
            rng.gen_range(-config.elevation_jitter_deg..=config.elevation_jitter_deg)
        } else {
            0.0
        };
        let cam = orbit_camera(
            scene.center,
            az,
            jitter.to_radians(),
            config.distance,
            config.focal,
            config.width,
            config.height,
        )?;
        let mut frame = scene.render_oracle(&cam, i % config.flash_every == 0);
        if val.contains(&i) {
            frame.split = Split::Val;
        }
        frames.push(frame);
    }
    Ok(SyntheticDataset {
        frames,
        cloud: scene.cloud.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Metrics {
    pub psnr_relit: f64,
    pub albedo_corr: f64,
    pub normal_mae_deg: f64,
    pub mask_iou: f64,
    pub frames: usize,
}

pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Mean over channels of the Pearson correlation between `pred`, rescaled
/// by its least-squares factor onto `gt`, and `gt`. A positive global scale
/// per channel leaves the value unchanged.
pub fn aligned_correlation(pred: &[Vec<f64>; 3], gt: &[Vec<f64>; 3]) -> f64 {
    let mut sum = 0.0;
    for c in 0..3 {
        let pp: f64 = pred[c].iter().map(|v| v * v).sum();
        let pg: f64 = pred[c].iter().zip(&gt[c]).map(|(p, g)| p * g).sum();
        let k = if pp > 0.0 { pg / pp } else { 0.0 };
        let scaled: Vec<f64> = pred[c].iter().map(|v| v * k).collect();
        sum += pearson(&scaled, &gt[c]);
    }
    sum / 3.0
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Metrics of predicted heads on frames carrying ground truth. `predict`
/// returns the heads, light colors and flash distance to use for a frame.
pub fn evaluate_heads(
    frames: &[&Frame],
    mut predict: impl FnMut(&Frame) -> Result<(HeadMaps, LightColors, f64)>,
) -> Result<Metrics> {
    if frames.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let mut psnr_sum = 0.0;
    let (mut pred_a, mut gt_a): ([Vec<f64>; 3], [Vec<f64>; 3]) = Default::default();
    let (mut angle_sum, mut angle_n) = (0.0, 0usize);
    let (mut inter, mut union) = (0usize, 0usize);
    for frame in frames {
        let gt = frame
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::invalid("frame has no ground-truth maps"))?;
        let (heads, lights, d) = predict(frame)?;
        heads.check_shapes()?;
        if (heads.height(), heads.width()) != (gt.height(), gt.width()) {
            return Err(Error::invalid("prediction size differs from frame"));
        }
        let flash = frame.flash.then(|| Flash {
            distance: d,
            rays: FlashRays::for_camera(&frame.camera, false),
        });
        let mut img = compose_original(&heads, &lights, flash.as_ref(), &LightingOptions::default())?;
        crate::render::matte(&mut img, &heads.mask);
        psnr_sum += psnr(&img, &frame.image);
        let hw = gt.mask.plane_len();
        for i in 0..hw {
            let fg = gt.mask.data[i] > 0.5;
            let pm = heads.mask.data[i] >= 0.5;
            inter += (fg && pm) as usize;
            union += (fg || pm) as usize;
            if !fg {
                continue;
            }
            for c in 0..3 {
                pred_a[c].push(heads.albedo.data[c * hw + i] as f64);
                gt_a[c].push(gt.albedo.data[c * hw + i] as f64);
            }
            let (a, b) = (heads.normal(i), gt.normal(i));
            let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) as f64;
            let na = ((a[0] * a[0] + a[1] * a[1] + a[2] * a[2]) as f64).sqrt();
            let nb = ((b[0] * b[0] + b[1] * b[1] + b[2] * b[2]) as f64).sqrt();
            angle_sum += (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees();
            angle_n += 1;
        }
    }
    Ok(Metrics {
        psnr_relit: psnr_sum / frames.len() as f64,
        albedo_corr: aligned_correlation(&pred_a, &gt_a),
        normal_mae_deg: if angle_n > 0 { angle_sum / angle_n as f64 } else { 0.0 },
        mask_iou: if union > 0 { inter as f64 / union as f64 } else { 1.0 },
        frames: frames.len(),
    })
}

/// Evaluates a fitted model on the frames of `split`.
pub fn evaluate(model: &SceneModel, frames: &[Frame], split: Split) -> Result<Metrics> {
    let chosen: Vec<&Frame> = frames.iter().filter(|f| f.split == split).collect();
    let opts = RenderOptions::default();
    evaluate_heads(&chosen, |frame| {
        let heads = render_heads(model, &frame.camera, opts.z_near)?;
        let d = if frame.flash { flash_for(model, &frame.camera, &opts.lighting)?.distance } else { 1.0 };
        Ok((heads, model.lights, d))
    })
}

/// Renders a frame's view of `model` with its original lighting, matted.
pub fn render_frame(model: &SceneModel, frame: &Frame) -> Result<Image> {
    let heads = render_heads(model, &frame.camera, RenderOptions::default().z_near)?;
    shade(
        model,
        &frame.camera,
        &heads,
        &LightingSpec::Original { flash: frame.flash },
        &RenderOptions::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scene() -> SyntheticScene {
        generate_scene(3, &SceneConfig { points: 20_000, ..SceneConfig::default() }).unwrap()
    }

    fn frontal(scene: &SyntheticScene) -> Camera {
        orbit_camera(scene.center, 0.0, 0.0, 3.0, 180.0, 160, 160).unwrap()
    }

    #[test]
    fn orbit_geometry() {
        let cam = orbit_camera(Vector3::zeros(), 0.0, 0.0, 3.0, 100.0, 64, 64).unwrap();
        assert!((cam.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!((cam.center() - Vector3::new(0.0, 0.0, -3.0)).norm() < 1e-12);
        let side = orbit_camera(Vector3::zeros(), std::f64::consts::FRAC_PI_2, 0.0, 3.0, 100.0, 64, 64).unwrap();
        assert!((side.center() - Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((view_axis(&side) - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        let above = orbit_camera(Vector3::zeros(), 0.3, 0.4, 3.0, 100.0, 64, 64).unwrap();
        assert!((above.rotation.transpose() * above.rotation - Matrix3::identity()).abs().max() < 1e-12);
        // The target projects to the principal point.
        let (u, v, _) = crate::scene::project_point(&above, &Vector3::zeros());
        assert!((u - 31.5).abs() < 1e-9 && (v - 31.5).abs() < 1e-9);
    }

    #[test]
    fn points_lie_on_the_sphere_with_analytic_normals() {
        let scene = small_scene();
        assert_eq!(scene.cloud.len(), 20_000);
        for p in scene.cloud.iter().take(500) {
            assert!(((p - scene.center).norm() - 1.0).abs() < 1e-6);
            let n = scene.normal(&p);
            assert!((n - (p - scene.center) / scene.radius).norm() < 1e-12);
        }
        let again = generate_scene(3, &SceneConfig { points: 20_000, ..SceneConfig::default() }).unwrap();
        assert_eq!(again.cloud, scene.cloud);
    }

    #[test]
    fn octant_counts_pass_chi_square() {
        let scene = small_scene();
        let mut bins = [0usize; 8];
        for p in scene.cloud.iter() {
            let k = (p.x > 0.0) as usize | ((p.y > 0.0) as usize) << 1 | ((p.z > 0.0) as usize) << 2;
            bins[k] += 1;
        }
        let e = scene.cloud.len() as f64 / 8.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 99th percentile of χ² with 7 degrees of freedom.
        assert!(chi2 < 18.475, "χ² = {chi2}, bins {bins:?}");
    }

    #[test]
    fn albedo_is_mirror_symmetric_and_in_range() {
        let scene = small_scene();
        for p in scene.cloud.iter().take(2000) {
            let n = scene.normal(&p);
            let m = Vector3::new(-n.x, n.y, n.z);
            assert_eq!(scene.albedo(&n), scene.albedo(&m));
            assert!(scene.albedo(&n).iter().all(|v| *v > 0.05 && *v < 0.9));
            let s = scene.shading(&n);
            assert!(s > 0.0 && s <= 0.9 + 1e-12);
        }
        // Shading is not symmetric.
        let n = SyntheticScene::from_lon_lat(0.5, 0.2);
        let m = Vector3::new(-n.x, n.y, n.z);
        assert!((scene.shading(&n) - scene.shading(&m)).abs() > 0.05);
    }

    #[test]
    fn flash_adds_nonnegative_light_only_where_facing() {
        let scene = small_scene();
        let cam = orbit_camera(scene.center, 0.4, 0.1, 3.0, 180.0, 96, 96).unwrap();
        let off = scene.render_oracle(&cam, false);
        let on = scene.render_oracle(&cam, true);
        let axis = view_axis(&cam);
        let gt = on.ground_truth.as_ref().unwrap();
        for i in 0..96 * 96 {
            let n = gt.normal(i).map(|v| v as f64);
            let facing = -(n[0] * axis.x + n[1] * axis.y + n[2] * axis.z) > 0.0;
            for c in 0..3 {
                let (a, b) = (off.image.data[c * 9216 + i], on.image.data[c * 9216 + i]);
                assert!(b >= a);
                if !facing {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn frontal_center_pixel_gains_exact_flash_term() {
        let scene = small_scene();
        let cam = frontal(&scene);
        let off = scene.render_oracle(&cam, false);
        let on = scene.render_oracle(&cam, true);
        let i = 80 * 160 + 80;
        let n = scene.normal(&scene.intersect(&cam.center(), &cam.pixel_ray(80.0, 80.0)).unwrap());
        let rho = scene.albedo(&n);
        let cos = -n.dot(&view_axis(&cam));
        assert!(cos > 0.9999);
        for c in 0..3 {
            let added = (on.image.data[c * 25600 + i] - off.image.data[c * 25600 + i]) as f64;
            let want = rho[c] * scene.lights.flash[c] as f64 / 4.0 * cos;
            assert!((added - want).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_matches_engine_composition() {
        let scene = small_scene();
        for (k, flash) in [(0.0, true), (0.7, false), (-1.2, true)] {
            let cam = orbit_camera(scene.center, k, 0.2 * k, 3.2, 150.0, 80, 72).unwrap();
            let frame = scene.render_oracle(&cam, flash);
            let f = Flash { distance: scene.flash_distance(&cam), rays: FlashRays::for_camera(&cam, false) };
            let img = compose_original(
                frame.ground_truth.as_ref().unwrap(),
                &scene.lights,
                flash.then_some(&f),
                &LightingOptions::default(),
            )
            .unwrap();
            let err = img.data.iter().zip(&frame.image.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err < 1e-6, "max error {err}");
        }
    }

    #[test]
    fn posmap_is_mirror_consistent() {
        let scene = small_scene();
        let cam = frontal(&scene);
        let frame = scene.render_oracle(&cam, false);
        let pm = frame.posmap.as_ref().unwrap();
        frame.validate().unwrap();
        // The frontal view is mirror-symmetric, so mirrored texels project to
        // mirrored pixel columns about cx.
        let mut checked = 0;
        for i in 0..UV_SIZE {
            for j in 0..UV_SIZE / 2 {
                let (a, b) = (i * UV_SIZE + j, i * UV_SIZE + UV_SIZE - 1 - j);
                assert_eq!(pm.is_valid(a), pm.is_valid(b));
                if pm.is_valid(a) {
                    let (pa, pb) = (pm.coords()[a], pm.coords()[b]);
                    assert!((pa[0] + pb[0] - 2.0 * cam.cx as f32).abs() < 1e-3);
                    assert!((pa[1] - pb[1]).abs() < 1e-3);
                    checked += 1;
                }
            }
        }
        assert!(checked > 10_000);
        // Albedo sampled through mirrored texels is equal.
        for i in (0..UV_SIZE).step_by(7) {
            let lat = CHART_LAT * (1.0 - 2.0 * (i as f64 + 0.5) / UV_SIZE as f64);
            for j in (0..UV_SIZE / 2).step_by(5) {
                let lon = std::f64::consts::PI * ((j as f64 + 0.5) / UV_SIZE as f64 - 0.5);
                let a = scene.albedo(&SyntheticScene::from_lon_lat(lon, lat));
                let b = scene.albedo(&SyntheticScene::from_lon_lat(-lon, lat));
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn dataset_protocol() {
        let scene = small_scene();
        let cfg = DatasetConfig { views: 100, width: 24, height: 24, focal: 27.0, ..DatasetConfig::default() };
        let ds = make_dataset(&scene, &cfg, 0).unwrap();
        assert_eq!(ds.frames.len(), 100);
        assert_eq!(ds.frames.iter().filter(|f| f.flash).count(), 20);
        assert_eq!(ds.frames.iter().filter(|f| f.split == Split::Val).count(), 30);
        assert_eq!(validation_indices(60, 5).len(), 18);
        let az: Vec<f64> = ds
            .frames
            .iter()
            .map(|f| {
                let c = f.camera.center();
                c.x.atan2(-c.z)
            })
            .collect();
        let step = az[1] - az[0];
        assert!((step - std::f64::consts::PI / 99.0).abs() < 1e-9);
        assert!(az.windows(2).all(|w| (w[1] - w[0] - step).abs() < 1e-9));
        assert!((az[0] + std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn ground_truth_self_evaluation() {
        let scene = small_scene();
        let cfg = DatasetConfig { views: 12, width: 64, height: 64, focal: 72.0, ..DatasetConfig::default() };
        let ds = make_dataset(&scene, &cfg, 0).unwrap();
        let val: Vec<&Frame> = ds.frames.iter().filter(|f| f.split == Split::Val).collect();
        let m = evaluate_heads(&val, |f| {
            Ok((f.ground_truth.clone().unwrap(), scene.lights, crate::scene::flash_distance(&f.camera, &scene.cloud)?))
        })
        .unwrap();
        assert!(m.psnr_relit >= 60.0, "{m:?}");
        assert!(m.normal_mae_deg < 1e-3, "{m:?}");
        assert!((m.albedo_corr - 1.0).abs() < 1e-9, "{m:?}");
        assert_eq!(m.mask_iou, 1.0);
        // Constant grey albedo carries no correlation with the checker.
        let m = evaluate_heads(&val, |f| {
            let mut h = f.ground_truth.clone().unwrap();
            h.albedo.data.iter_mut().for_each(|v| *v = 0.5);
            Ok((h, scene.lights, 2.0))
        })
        .unwrap();
        assert!(m.albedo_corr.abs() < 1e-9, "{m:?}");
        assert!(evaluate_heads(&[], |_| unreachable!()).is_err());
    }

    #[test]
    fn metric_helpers_match_scalar_formulas() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.1, 5.9, 8.2];
        let (mx, my) = (2.5, (2.0 + 4.1 + 5.9 + 8.2) / 4.0);
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>().sqrt();
        let sy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum::<f64>().sqrt();
        assert!((pearson(&x, &y) - cov / (sx * sy)).abs() < 1e-12);
        let a = Image::filled(1, 2, 2, 0.5);
        let b = Image::filled(1, 2, 2, 0.6);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-5);
        // Per-channel scale alignment removes a global color cast.
        let gt = [vec![0.1, 0.5, 0.9], vec![0.2, 0.4, 0.8], vec![0.3, 0.3, 0.6]];
        let pred = [gt[0].iter().map(|v| v * 2.0).collect(), gt[1].iter().map(|v| v * 0.5).collect(), gt[2].clone()];
        assert!((aligned_correlation(&pred, &gt) - 1.0).abs() < 1e-12);
    }
}
