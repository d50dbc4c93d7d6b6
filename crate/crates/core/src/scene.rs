//! Geometric and photometric scene state.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::net::{HeadMaps, NetConfig, NetParams};

/// Side of the square UV chart addressed by a [`Posmap`].
pub const UV_SIZE: usize = 256;
/// Width of the learnable left-half albedo texture.
pub const HALF_TEX_WIDTH: usize = UV_SIZE / 2;

/// Pinhole camera. World to camera is `x_c = R·p + t`; the camera looks
/// down +z and pixel `(i, j)` has its center at `u = j, v = i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate(1e-6)?;
        Ok(cam)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera size must be at least 1×1"));
        }
        let finite = [self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("camera parameters must be finite"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > tol {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:.3e})"
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Intrinsics scaled by `factor`; the canvas becomes `⌈W·factor⌉×⌈H·factor⌉`.
    pub fn scaled(&self, factor: f64) -> Camera {
        Camera {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: ((self.width as f64 * factor).ceil() as usize).max(1),
            height: ((self.height as f64 * factor).ceil() as usize).max(1),
            ..self.clone()
        }
    }

    /// Camera for pyramid level `level`: intrinsics scaled by `2^-level`,
    /// canvas `⌈W/2^level⌉×⌈H/2^level⌉`.
    pub fn level(&self, level: usize) -> Camera {
        let mut c = self.scaled(0.5f64.powi(level as i32));
        c.width = self.width.div_ceil(1 << level);
        c.height = self.height.div_ceil(1 << level);
        c
    }

    /// Window of `width×height` pixels starting at pixel `(x0, y0)`.
    pub fn cropped(&self, x0: i64, y0: i64, width: usize, height: usize) -> Camera {
        Camera {
            cx: self.cx - x0 as f64,
            cy: self.cy - y0 as f64,
            width,
            height,
            ..self.clone()
        }
    }

    /// World-space direction of the ray through pixel center `(x, y)`.
    pub fn pixel_ray(&self, x: f64, y: f64) -> Vector3<f64> {
        let d = Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }
}

/// `(u, v, z_cam)` of world point `p`; returned even when `z_cam <= 0`.
pub fn project_point(camera: &Camera, p: &Vector3<f64>) -> (f64, f64, f64) {
    let xc = camera.rotation * p + camera.translation;
    let z = xc.z;
    (camera.fx * xc.x / z + camera.cx, camera.fy * xc.y / z + camera.cy, z)
}

/// Distance from the camera center to the closest cloud point.
pub fn flash_distance(camera: &Camera, cloud: &PointCloud) -> Result<f64> {
    let c = camera.center();
    cloud
        .iter()
        .map(|p| (p - c).norm())
        .reduce(f64::min)
        .ok_or(Error::EmptyCloud)
}

/// World-space forward axis `Rᵀ·(0, 0, 1)`, the shared flash direction.
pub fn view_axis(camera: &Camera) -> Vector3<f64> {
    camera.rotation.transpose() * Vector3::z()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        let p = self.positions[i];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn iter(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

/// Learnable per-point latent vectors, row-major N×L.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    width: usize,
    values: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(width: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || values.len() % width != 0 {
            return Err(Error::invalid(format!(
                "descriptor buffer of {} values does not split into rows of {width}",
                values.len()
            )));
        }
        Ok(Self { width, values })
    }

    pub fn zeros(count: usize, width: usize) -> Self {
        Self {
            width,
            values: vec![0.0; count * width],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// Global room and flash colors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightColors {
    pub room: [f32; 3],
    pub flash: [f32; 3],
}

impl LightColors {
    /// Projects both colors onto the admissible set (finite, ≥ 0).
    pub fn clamp_nonnegative(&mut self) {
        for v in self.room.iter_mut().chain(self.flash.iter_mut()) {
            if !v.is_finite() || *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// UV→screen map over a [`UV_SIZE`]² chart. Texels without a screen
/// location hold NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct Posmap {
    coords: Vec<[f32; 2]>,
}

impl Posmap {
    pub fn new(coords: Vec<[f32; 2]>) -> Result<Self> {
        if coords.len() != UV_SIZE * UV_SIZE {
            return Err(Error::invalid(format!(
                "posmap needs {} texels, got {}",
                UV_SIZE * UV_SIZE,
                coords.len()
            )));
        }
        let coords = coords
            .into_iter()
            .map(|c| {
                if c[0].is_finite() && c[1].is_finite() && c[0] >= 0.0 && c[1] >= 0.0 {
                    c
                } else {
                    [f32::NAN; 2]
                }
            })
            .collect();
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }

    pub fn is_valid(&self, texel: usize) -> bool {
        !self.coords[texel][0].is_nan()
    }

    /// Coordinates after zooming the image by `zoom` and cropping at `(x0, y0)`.
    pub fn transformed(&self, zoom: f64, x0: f64, y0: f64) -> Vec<[f64; 2]> {
        self.coords
            .iter()
            .map(|c| [c[0] as f64 * zoom - x0, c[1] as f64 * zoom - y0])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One registered capture.
#[derive(Clone, Debug)]
pub struct Frame {
    /// Linear-light RGB.
    pub image: Image,
    pub mask: Image,
    pub camera: Camera,
    pub flash: bool,
    pub posmap: Option<Posmap>,
    /// World-space unit normals over the face region; zero vectors mark
    /// pixels outside it.
    pub face_normals: Option<Image>,
    /// Reference maps, available for synthetic captures.
    pub ground_truth: Option<HeadMaps>,
    pub split: Split,
}

impl Frame {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.camera.width, self.camera.height);
        if (self.image.channels, self.image.height, self.image.width) != (3, h, w) {
            return Err(Error::invalid("image size does not match camera"));
        }
        if (self.mask.channels, self.mask.height, self.mask.width) != (1, h, w) {
            return Err(Error::invalid("mask size does not match camera"));
        }
        if !self.image.all_finite() || !self.mask.all_finite() {
            return Err(Error::invalid("image and mask must be finite"));
        }
        if let Some(n) = &self.face_normals {
            if (n.channels, n.height, n.width) != (3, h, w) {
                return Err(Error::invalid("face normals size does not match camera"));
            }
        }
        if let Some(p) = &self.posmap {
            let inside = p.coords().iter().filter(|c| !c[0].is_nan()).all(|c| {
                (c[0] as f64) < w as f64 && (c[1] as f64) < h as f64
            });
            if !inside {
                return Err(Error::invalid("posmap coordinates outside the image"));
            }
        }
        Ok(())
    }

    /// Per-pixel face-region indicator derived from `face_normals`.
    pub fn face_mask(&self) -> Option<Vec<f32>> {
        self.face_normals.as_ref().map(|n| {
            (0..n.plane_len())
                .map(|i| {
                    let v = [n.data[i], n.data[n.plane_len() + i], n.data[2 * n.plane_len() + i]];
                    if v.iter().any(|c| *c != 0.0) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
    }
}

/// Everything fitted for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub cloud: PointCloud,
    pub descriptors: DescriptorSet,
    pub net_config: NetConfig,
    pub net_params: NetParams,
    pub lights: LightColors,
    /// 3×256×128 left-half albedo texture.
    pub albedo_halftex: Image,
    pub trained_steps: u64,
}

impl SceneModel {
    pub fn validate(&self) -> Result<()> {
        if self.descriptors.count() != self.cloud.len() {
            return Err(Error::invalid(format!(
                "{} descriptors for {} points",
                self.descriptors.count(),
                self.cloud.len()
            )));
        }
        if self.descriptors.width() != self.net_config.descriptor_width {
            return Err(Error::invalid("descriptor width does not match network"));
        }
        let t = &self.albedo_halftex;
        if (t.channels, t.height, t.width) != (3, UV_SIZE, HALF_TEX_WIDTH) {
            return Err(Error::invalid("albedo half-texture must be 3×256×128"));
        }
        self.net_params.check(&self.net_config)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::{Matrix4, Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn identity_camera() -> Camera {
        Camera::new(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 4, 4).unwrap()
    }

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let axis = Unit::new_normalize(axis + Vector3::new(1e-3, 0.0, 0.0));
        *Rotation3::from_axis_angle(&axis, rng.gen_range(-3.0..3.0)).matrix()
    }

    fn random_camera(rng: &mut impl Rng) -> Camera {
        Camera::new(
            rng.gen_range(50.0..300.0),
            rng.gen_range(50.0..300.0),
            rng.gen_range(0.0..64.0),
            rng.gen_range(0.0..64.0),
            random_rotation(rng),
            Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
            64,
            64,
        )
        .unwrap()
    }

    #[test]
    fn projects_on_axis_and_by_similar_triangles() {
        let cam = identity_camera();
        assert_eq!(project_point(&cam, &Vector3::new(0.0, 0.0, 2.0)), (0.0, 0.0, 2.0));
        assert_eq!(project_point(&cam, &Vector3::new(1.0, 0.0, 2.0)), (0.5, 0.0, 2.0));
    }

    #[test]
    fn projection_matches_homogeneous_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let p = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            // K·[R|t] as 4×4 homogeneous matrices.
            let mut k = Matrix4::identity();
            k[(0, 0)] = cam.fx;
            k[(1, 1)] = cam.fy;
            k[(0, 2)] = cam.cx;
            k[(1, 2)] = cam.cy;
            let mut rt = Matrix4::identity();
            rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
            rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.translation);
            let h = k * rt * p.push(1.0);
            let (u, v, z) = project_point(&cam, &p);
            assert!((u - h.x / h.z).abs() < 1e-9 * (1.0 + u.abs()));
            assert!((v - h.y / h.z).abs() < 1e-9 * (1.0 + v.abs()));
            assert!((z - h.z).abs() < 1e-9);
        }
    }

    #[test]
    fn flash_distance_examples() {
        let cam = identity_camera();
        let cloud = PointCloud::new(vec![[0.0, 0.0, 3.0], [0.0, 2.0, 0.0], [5.0, 0.0, 0.0]]).unwrap();
        assert_eq!(flash_distance(&cam, &cloud).unwrap(), 2.0);
        let at_center = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(flash_distance(&cam, &at_center).unwrap(), 0.0);
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
    }

    #[test]
    fn flash_distance_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cam = random_camera(&mut rng);
        let pts: Vec<[f32; 3]> = (0..10_000)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let c = cam.center();
        let mut best = f64::INFINITY;
        for p in &pts {
            let d = ((p[0] as f64 - c.x).powi(2) + (p[1] as f64 - c.y).powi(2) + (p[2] as f64 - c.z).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
        assert!((flash_distance(&cam, &cloud).unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn view_axis_examples() {
        assert_eq!(view_axis(&identity_camera()), Vector3::new(0.0, 0.0, 1.0));
        let mut cam = identity_camera();
        cam.rotation = *Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI).matrix();
        assert!((view_axis(&cam) - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let cam = random_camera(&mut rng);
            let r = cam.rotation;
            let direct = Vector3::new(r[(2, 0)], r[(2, 1)], r[(2, 2)]);
            let axis = view_axis(&cam);
            assert!((axis - direct).norm() < 1e-12);
            assert!((axis.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_invalid_cameras() {
        let bad_rot = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, bad_rot, Vector3::zeros(), 4, 4).is_err());
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 4, 4).is_err());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 0, 4).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_rigid_motion_equivariant(
            seed in 0u64..10_000,
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            angle in -3.0f64..3.0,
            tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cam = random_camera(&mut rng);
            let p = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let q = *Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(ax, ay, az + 1.5)), angle).matrix();
            let s = Vector3::new(tx, ty, tz);
            // Move the world by p' = Q·p + s and compensate in the camera.
            let moved = Camera {
                rotation: cam.rotation * q.transpose(),
                translation: cam.translation - cam.rotation * q.transpose() * s,
                ..cam.clone()
            };
            let (u0, v0, z0) = project_point(&cam, &p);
            let (u1, v1, z1) = project_point(&moved, &(q * p + s));
            prop_assume!(z0.abs() > 1e-2);
            let scale = 1.0 + u0.abs().max(v0.abs());
            prop_assert!((u0 - u1).abs() < 1e-7 * scale);
            prop_assert!((v0 - v1).abs() < 1e-7 * scale);
            prop_assert!((z0 - z1).abs() < 1e-7);
        }

        #[test]
        fn flash_distance_is_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cam = random_camera(&mut rng);
            let mut pts: Vec<[f32; 3]> = (0..200)
                .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
                .collect();
            let a = flash_distance(&cam, &PointCloud::new(pts.clone()).unwrap()).unwrap();
            pts.reverse();
            pts.rotate_left(seed as usize % 200);
            let b = flash_distance(&cam, &PointCloud::new(pts).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
