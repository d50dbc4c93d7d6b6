//! Multi-resolution z-buffer rasterization of point descriptors.
//!
//! Every point splats to exactly one pixel (nearest-pixel rounding of its
//! projection). The closest point wins a pixel; equal depths go to the lower
//! point index. Pixels nobody reaches carry the zero descriptor.

use crate::diff::{DiffError, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::{project_point, Camera, DescriptorSet, PointCloud};

/// Points with `z_cam` at or below this are culled.
pub const DEFAULT_Z_NEAR: f64 = 1e-4;
/// Winner index of an empty pixel.
pub const NO_HIT: u32 = u32::MAX;

/// Z-buffer visibility for one canvas, independent of descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub width: usize,
    pub height: usize,
    /// Winning point per pixel, row-major, [`NO_HIT`] where empty.
    pub winners: Vec<u32>,
    /// Camera-space depth of the winner, `+∞` where empty.
    pub depth: Vec<f64>,
}

impl Coverage {
    pub fn hit(&self, pixel: usize) -> bool {
        self.winners[pixel] != NO_HIT
    }
}

/// Descriptor raster `S[t]` for one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub coverage: Coverage,
    pub descriptor_width: usize,
    /// Planar L×H×W descriptor values.
    pub data: Vec<f32>,
}

impl RawImage {
    pub fn width(&self) -> usize {
        self.coverage.width
    }

    pub fn height(&self) -> usize {
        self.coverage.height
    }

    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        Tensor::new(
            &[self.descriptor_width, self.height(), self.width()],
            self.data.iter().map(|&v| S::from_f32(v).expect("finite")).collect(),
        )
        .expect("raw image shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawImagePyramid {
    pub levels: Vec<RawImage>,
}

/// Z-buffers `cloud` into `camera`'s canvas.
pub fn coverage(cloud: &PointCloud, camera: &Camera, z_near: f64) -> Coverage {
    let (w, h) = (camera.width, camera.height);
    let mut winners = vec![NO_HIT; w * h];
    let mut depth = vec![f64::INFINITY; w * h];
    for (i, p) in cloud.iter().enumerate() {
        let (u, v, z) = project_point(camera, &p);
        if !(z > z_near) {
            continue;
        }
        let (px, py) = ((u + 0.5).floor(), (v + 0.5).floor());
        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
            continue;
        }
        let pix = py as usize * w + px as usize;
        // Strict comparison in index order keeps the lowest index on ties.
        if z < depth[pix] {
            depth[pix] = z;
            winners[pix] = i as u32;
        }
    }
    Coverage {
        width: w,
        height: h,
        winners,
        depth,
    }
}

fn check_sizes(cloud: &PointCloud, desc: &DescriptorSet) -> Result<()> {
    if cloud.len() != desc.count() {
        return Err(Error::invalid(format!(
            "{} descriptors for {} points",
            desc.count(),
            cloud.len()
        )));
    }
    if cloud.len() >= NO_HIT as usize {
        return Err(Error::invalid("point cloud too large for 32-bit indices"));
    }
    Ok(())
}

/// Fills descriptor planes from a coverage map.
pub fn gather(coverage: Coverage, desc: &DescriptorSet) -> RawImage {
    let l = desc.width();
    let hw = coverage.width * coverage.height;
    let mut data = vec![0.0f32; l * hw];
    for (pix, &win) in coverage.winners.iter().enumerate() {
        if win == NO_HIT {
            continue;
        }
        for (k, &v) in desc.row(win as usize).iter().enumerate() {
            data[k * hw + pix] = v;
        }
    }
    RawImage {
        coverage,
        descriptor_width: l,
        data,
    }
}

/// Raw image at pyramid `level` (intrinsics scaled by `2^-level`).
pub fn rasterize(
    cloud: &PointCloud,
    desc: &DescriptorSet,
    camera: &Camera,
    level: usize,
    z_near: f64,
) -> Result<RawImage> {
    check_sizes(cloud, desc)?;
    Ok(gather(coverage(cloud, &camera.level(level), z_near), desc))
}

/// Raw images for levels `0..=levels`.
pub fn build_pyramid(
    cloud: &PointCloud,
    desc: &DescriptorSet,
    camera: &Camera,
    levels: usize,
    z_near: f64,
) -> Result<RawImagePyramid> {
    check_sizes(cloud, desc)?;
    Ok(RawImagePyramid {
        levels: (0..=levels)
            .map(|t| gather(coverage(cloud, &camera.level(t), z_near), desc))
            .collect(),
    })
}

/// Routes a raw-image gradient (planar L×H×W) back to descriptor rows.
/// Each pixel's gradient goes to its winning point; rows are summed.
pub fn backward_rasterize<S: Real>(
    raw_grad: &[S],
    coverage: &Coverage,
    descriptor_width: usize,
    point_count: usize,
) -> Result<Vec<S>, DiffError> {
    let hw = coverage.width * coverage.height;
    if raw_grad.len() != descriptor_width * hw {
        return Err(DiffError::Shape(format!(
            "raw gradient has {} values, expected {}×{hw}",
            raw_grad.len(),
            descriptor_width
        )));
    }
    let mut out = vec![S::zero(); point_count * descriptor_width];
    for (pix, &win) in coverage.winners.iter().enumerate() {
        if win == NO_HIT {
            continue;
        }
        let win = win as usize;
        if win >= point_count {
            return Err(DiffError::Shape(format!(
                "winner {win} outside {point_count} points"
            )));
        }
        for k in 0..descriptor_width {
            out[win * descriptor_width + k] += raw_grad[k * hw + pix];
        }
    }
    Ok(out)
}

/// Records the descriptor gather for `coverage` on a tape. `desc` holds the
/// N×L descriptor matrix.
pub fn gather_on_tape<S: Real>(tape: &mut Tape<S>, desc: Var, coverage: &Coverage) -> Result<Var, DiffError> {
    let [n, l] = tape.value(desc).shape()[..] else {
        return Err(DiffError::Shape("descriptors must be N×L".into()));
    };
    let (h, w) = (coverage.height, coverage.width);
    let hw = h * w;
    let dv = tape.value(desc).data();
    let mut out = vec![S::zero(); l * hw];
    for (pix, &win) in coverage.winners.iter().enumerate() {
        if win == NO_HIT {
            continue;
        }
        let row = &dv[win as usize * l..(win as usize + 1) * l];
        for (k, &v) in row.iter().enumerate() {
            out[k * hw + pix] = v;
        }
    }
    let value = Tensor::new(&[l, h, w], out)?;
    let cov = coverage.clone();
    Ok(tape.push(value, &[desc], move |_, g, acc| {
        let grad = backward_rasterize(g.data(), &cov, l, n).expect("coverage matches forward");
        acc.push((desc, Tensor::new(&[n, l], grad).expect("shape")));
    }))
}
