//! Closed-form shading: training composition, directional + ambient and
//! added point-light relighting, and order-2 spherical-harmonics relighting.

use nalgebra::{Matrix4, Vector4};

use crate::diff::{DiffError, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::net::{HeadMaps, HeadVars};
use crate::scene::{Camera, LightColors};

/// Irradiance-matrix constants for bands `l ≤ 2`.
pub const SH_C1: f64 = 0.429043;
pub const SH_C2: f64 = 0.511664;
pub const SH_C3: f64 = 0.743125;
pub const SH_C4: f64 = 0.886227;
pub const SH_C5: f64 = 0.247708;

/// Coefficients per color channel.
pub const SH_PER_CHANNEL: usize = 9;
pub const SH_COUNT: usize = 3 * SH_PER_CHANNEL;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightingOptions {
    /// Clamp the flash cosine at zero.
    pub clamp_flash_cosine: bool,
    /// Use one flash direction per pixel instead of the view axis.
    pub per_pixel_rays: bool,
}

impl Default for LightingOptions {
    fn default() -> Self {
        Self {
            clamp_flash_cosine: true,
            per_pixel_rays: false,
        }
    }
}

/// Lighting request, as exchanged over JSON.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LightingSpec {
    Original {
        flash: bool,
    },
    DirectionalAmbient {
        direction: [f64; 3],
        ambient: f64,
        color: [f64; 3],
    },
    AdditionalPoint {
        direction: [f64; 3],
        distance: f64,
        color: [f64; 3],
    },
    Sh {
        coefficients: Vec<f64>,
    },
}

impl LightingSpec {
    pub const MODES: [&'static str; 4] = ["original", "directional_ambient", "additional_point", "sh"];

    /// Validates ranges and rescales direction vectors to unit length.
    pub fn normalized(&self) -> Result<LightingSpec> {
        fn unit(name: &str, v: [f64; 3]) -> Result<[f64; 3]> {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if !n.is_finite() || n < 1e-12 {
                return Err(Error::invalid(format!("{name} must be a finite non-zero vector")));
            }
            Ok(v.map(|c| c / n))
        }
        fn color(name: &str, c: [f64; 3]) -> Result<[f64; 3]> {
            if c.iter().all(|v| v.is_finite() && *v >= 0.0) {
                Ok(c)
            } else {
                Err(Error::invalid(format!("{name} must be finite and ≥ 0")))
            }
        }
        Ok(match self {
            Self::Original { flash } => Self::Original { flash: *flash },
            Self::DirectionalAmbient { direction, ambient, color: c } => {
                if !(0.0..=1.0).contains(ambient) {
                    return Err(Error::invalid("ambient must lie in [0, 1]"));
                }
                Self::DirectionalAmbient {
                    direction: unit("direction", *direction)?,
                    ambient: *ambient,
                    color: color("color", *c)?,
                }
            }
            Self::AdditionalPoint { direction, distance, color: c } => {
                if !(distance.is_finite() && *distance > 0.0) {
                    return Err(Error::invalid("distance must be > 0"));
                }
                Self::AdditionalPoint {
                    direction: unit("direction", *direction)?,
                    distance: *distance,
                    color: color("color", *c)?,
                }
            }
            Self::Sh { coefficients } => {
                if coefficients.len() != SH_COUNT {
                    return Err(Error::invalid(format!(
                        "coefficients must hold {SH_COUNT} values, got {}",
                        coefficients.len()
                    )));
                }
                if !coefficients.iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid("coefficients must be finite"));
                }
                Self::Sh {
                    coefficients: coefficients.clone(),
                }
            }
        })
    }
}

/// Flash incidence direction `ω_o` for each pixel.
#[derive(Clone, Debug, PartialEq)]
pub enum FlashRays {
    /// One direction for the whole view.
    Parallel([f64; 3]),
    /// Row-major per-pixel unit directions.
    PerPixel(Vec<[f64; 3]>),
}

impl FlashRays {
    pub fn for_camera(camera: &Camera, per_pixel: bool) -> Self {
        if per_pixel {
            let mut rays = Vec::with_capacity(camera.width * camera.height);
            for y in 0..camera.height {
                for x in 0..camera.width {
                    let r = camera.pixel_ray(x as f64, y as f64);
                    rays.push([r.x, r.y, r.z]);
                }
            }
            Self::PerPixel(rays)
        } else {
            let a = crate::scene::view_axis(camera);
            Self::Parallel([a.x, a.y, a.z])
        }
    }

    #[inline]
    fn at(&self, i: usize) -> [f64; 3] {
        match self {
            Self::Parallel(d) => *d,
            Self::PerPixel(v) => v[i],
        }
    }

    fn check(&self, pixels: usize) -> Result<()> {
        if let Self::PerPixel(v) = self {
            if v.len() != pixels {
                return Err(Error::invalid(format!("{} rays for {pixels} pixels", v.len())));
            }
        }
        Ok(())
    }
}

/// Flash state of one view: distance `d` to the nearest surface and rays.
#[derive(Clone, Debug, PartialEq)]
pub struct Flash {
    pub distance: f64,
    pub rays: FlashRays,
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normal_f64(heads: &HeadMaps, i: usize) -> [f64; 3] {
    heads.normal(i).map(|v| v as f64)
}

fn shade(heads: &HeadMaps, per_pixel: impl Fn(usize, usize, f64) -> f64) -> Result<Image> {
    heads.check_shapes()?;
    let hw = heads.albedo.plane_len();
    let mut out = Image::zeros(3, heads.height(), heads.width());
    for c in 0..3 {
        for i in 0..hw {
            let a = heads.albedo.data[c * hw + i] as f64;
            out.data[c * hw + i] = per_pixel(c, i, a) as f32;
        }
    }
    Ok(out)
}

/// Training-image composition
/// `I = A·C_room·S + F·A·(C_flash/d²)·⌊⟨N, −ω_o⟩⌋`.
pub fn compose_original(
    heads: &HeadMaps,
    lights: &LightColors,
    flash: Option<&Flash>,
    opts: &LightingOptions,
) -> Result<Image> {
    let hw = heads.albedo.plane_len();
    if let Some(f) = flash {
        if !(f.distance > 0.0) {
            return Err(Error::invalid("flash distance must be > 0"));
        }
        f.rays.check(hw)?;
    }
    shade(heads, |c, i, a| {
        let room = a * lights.room[c] as f64 * heads.shadow.data[i] as f64;
        let Some(f) = flash else { return room };
        let w = f.rays.at(i);
        let mut cos = -dot(normal_f64(heads, i), w);
        if opts.clamp_flash_cosine {
            cos = cos.max(0.0);
        }
        room + a * lights.flash[c] as f64 / (f.distance * f.distance) * cos
    })
}

/// `I′ = color·A·(α + (1−α)·⌊⟨N, −ω⟩⌋)`.
pub fn relight_directional(heads: &HeadMaps, direction: [f64; 3], ambient: f64, color: [f64; 3]) -> Result<Image> {
    shade(heads, |c, i, a| {
        let cos = (-dot(normal_f64(heads, i), direction)).max(0.0);
        color[c] * a * (ambient + (1.0 - ambient) * cos)
    })
}

/// Keeps the fitted room term and adds a point light of `color` from
/// `direction` at distance `distance`.
pub fn relight_additional_point(
    heads: &HeadMaps,
    lights: &LightColors,
    direction: [f64; 3],
    distance: f64,
    color: [f64; 3],
) -> Result<Image> {
    if !(distance > 0.0) {
        return Err(Error::invalid("point light distance must be > 0"));
    }
    shade(heads, |c, i, a| {
        let room = a * lights.room[c] as f64 * heads.shadow.data[i] as f64;
        let cos = (-dot(normal_f64(heads, i), direction)).max(0.0);
        room + a * color[c] / (distance * distance) * cos
    })
}

/// Per-channel 4×4 irradiance quadratic forms.
#[derive(Clone, Debug, PartialEq)]
pub struct ShMatrix {
    pub channels: [Matrix4<f64>; 3],
}

impl ShMatrix {
    /// `[n 1]ᵀ·M_c·[n 1]` for channel `c`.
    pub fn irradiance(&self, c: usize, n: [f64; 3]) -> f64 {
        let v = Vector4::new(n[0], n[1], n[2], 1.0);
        v.dot(&(self.channels[c] * v))
    }
}

/// Builds the irradiance matrices from 27 coefficients ordered
/// `(0,0),(1,−1),(1,0),(1,1),(2,−2),(2,−1),(2,0),(2,1),(2,2)` per channel,
/// red first.
pub fn sh_matrix(coefficients: &[f64]) -> Result<ShMatrix> {
    if coefficients.len() != SH_COUNT {
        return Err(Error::invalid(format!(
            "coefficients must hold {SH_COUNT} values, got {}",
            coefficients.len()
        )));
    }
    let build = |l: &[f64]| {
        let [l00, l1m1, l10, l11, l2m2, l2m1, l20, l21, l22] = l[..] else {
            unreachable!("nine coefficients")
        };
        Matrix4::new(
            SH_C1 * l22, SH_C1 * l2m2, SH_C1 * l21, SH_C2 * l11,
            SH_C1 * l2m2, -SH_C1 * l22, SH_C1 * l2m1, SH_C2 * l1m1,
            SH_C1 * l21, SH_C1 * l2m1, SH_C3 * l20, SH_C2 * l10,
            SH_C2 * l11, SH_C2 * l1m1, SH_C2 * l10, SH_C4 * l00 - SH_C5 * l20,
        )
    };
    Ok(ShMatrix {
        channels: [0, 1, 2].map(|c| build(&coefficients[c * 9..(c + 1) * 9])),
    })
}

/// `I′ = A·max([N 1]ᵀ·M·[N 1], 0)` per channel.
pub fn relight_sh(heads: &HeadMaps, coefficients: &[f64]) -> Result<Image> {
    let m = sh_matrix(coefficients)?;
    shade(heads, |c, i, a| a * m.irradiance(c, normal_f64(heads, i)).max(0.0))
}

/// Real SH basis `Y_lm(ω)` for bands `l ≤ 2` in coefficient order.
pub fn sh_basis(d: [f64; 3]) -> [f64; SH_PER_CHANNEL] {
    let [x, y, z] = d;
    [
        0.282_094_791_773_878_1,
        0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_05 * (3.0 * z * z - 1.0),
        1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (x * x - y * y),
    ]
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            loop {
                // Legendre recurrence for P_n(x) and P_{n-1}(x).
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let (pn, pn1) = if n == 1 { (x, 1.0) } else { (p1, p0) };
                let dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
                let dx = pn / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    let w = 2.0 / ((1.0 - x * x) * dp * dp);
                    return (x, w);
                }
            }
        })
        .collect()
}

/// Projects a radiance function onto the SH basis. Quadrature is
/// Gauss–Legendre in `cos θ` (`n_theta` rings) times `2·n_theta` uniform
/// azimuths, exact for the band-limited part up to degree `2·n_theta − 1`.
pub fn project_env_to_sh(radiance: impl Fn([f64; 3]) -> [f64; 3], n_theta: usize) -> Result<Vec<f64>> {
    if n_theta < 2 {
        return Err(Error::invalid("quadrature needs at least two rings"));
    }
    let n_phi = 2 * n_theta;
    let dp = 2.0 * std::f64::consts::PI / n_phi as f64;
    let mut out = vec![0.0; SH_COUNT];
    for (z, wz) in gauss_legendre(n_theta) {
        let s = (1.0 - z * z).max(0.0).sqrt();
        for j in 0..n_phi {
            let phi = (j as f64 + 0.5) * dp;
            let d = [s * phi.cos(), s * phi.sin(), z];
            let l = radiance(d);
            if !l.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("radiance sample is not finite"));
            }
            let y = sh_basis(d);
            for c in 0..3 {
                for k in 0..SH_PER_CHANNEL {
                    out[c * 9 + k] += l[c] * y[k] * wz * dp;
                }
            }
        }
    }
    Ok(out)
}

/// Projects an equirectangular panorama (rows span polar angle from
/// world up `−y` to down `+y`; columns span azimuth starting at `+z`
/// and turning towards `+x`).
pub fn project_panorama(pano: &Image) -> Result<Vec<f64>> {
    if pano.channels != 3 || pano.height == 0 || pano.width == 0 {
        return Err(Error::invalid("panorama must be a non-empty RGB image"));
    }
    let (h, w) = (pano.height, pano.width);
    let (dt, dp) = (std::f64::consts::PI / h as f64, 2.0 * std::f64::consts::PI / w as f64);
    let mut out = vec![0.0; SH_COUNT];
    for i in 0..h {
        let theta = (i as f64 + 0.5) * dt;
        let area = (((i as f64) * dt).cos() - ((i as f64 + 1.0) * dt).cos()) * dp;
        for j in 0..w {
            let phi = (j as f64 + 0.5) * dp;
            let d = [theta.sin() * phi.sin(), -theta.cos(), theta.sin() * phi.cos()];
            let y = sh_basis(d);
            for c in 0..3 {
                let l = pano.at(c, i, j) as f64;
                if !l.is_finite() {
                    return Err(Error::invalid("panorama sample is not finite"));
                }
                for k in 0..SH_PER_CHANNEL {
                    out[c * 9 + k] += l * y[k] * area;
                }
            }
        }
    }
    Ok(out)
}

/// Tape version of [`compose_original`]. `room` and `flash_color` are
/// 3-element variables.
pub fn compose_on_tape<S: Real>(
    tape: &mut Tape<S>,
    heads: &HeadVars,
    room: Var,
    flash_color: Var,
    flash: Option<&Flash>,
    opts: &LightingOptions,
) -> Result<Var, DiffError> {
    let shaded = tape.mul_channel(heads.albedo, room)?;
    let room_term = tape.mul_plane(shaded, heads.shadow)?;
    let Some(f) = flash else { return Ok(room_term) };
    if !(f.distance > 0.0) {
        return Err(DiffError::Shape("flash distance must be > 0".into()));
    }
    let cos = match &f.rays {
        FlashRays::Parallel(w) => tape.dot_dir(heads.normals, w.map(|v| S::lit(-v)))?,
        FlashRays::PerPixel(rays) => {
            let (_, h, w) = tape.value(heads.normals).chw()?;
            if rays.len() != h * w {
                return Err(DiffError::Shape(format!("{} rays for {} pixels", rays.len(), h * w)));
            }
            let mut field = vec![S::zero(); 3 * h * w];
            for (i, r) in rays.iter().enumerate() {
                for k in 0..3 {
                    field[k * h * w + i] = S::lit(-r[k]);
                }
            }
            tape.dot_field(heads.normals, &Tensor::new(&[3, h, w], field)?)?
        }
    };
    let cos = if opts.clamp_flash_cosine { tape.relu(cos) } else { cos };
    let scaled = tape.scale(flash_color, S::lit(1.0 / (f.distance * f.distance)));
    let lit = tape.mul_channel(heads.albedo, scaled)?;
    let flash_term = tape.mul_plane(lit, cos)?;
    tape.add(room_term, flash_term)
}
