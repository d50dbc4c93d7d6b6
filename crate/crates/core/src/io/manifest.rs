//! Dataset manifest: a JSON list of frames with file references resolved
//! relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::net::HeadMaps;
use crate::scene::{Camera, Frame, PointCloud, Posmap, Split, UV_SIZE};

use super::formats::{decode_ply, encode_f32, encode_ply, load_image, read_file, write_atomic};

/// Rotation orthonormality tolerance for cameras read from files.
pub const ROTATION_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub w: usize,
    pub h: usize,
}

impl CameraJson {
    pub fn to_camera(&self) -> Result<Camera> {
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Matrix3::from_row_slice(&self.r),
            translation: Vector3::from(self.t),
            width: self.w,
            height: self.h,
        };
        cam.validate(ROTATION_TOL)?;
        Ok(cam)
    }

    pub fn from_camera(c: &Camera) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = c.rotation[(i, j)];
            }
        }
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
            w: c.width,
            h: c.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthPaths {
    pub albedo: String,
    pub normals: String,
    pub shadow: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub image: String,
    pub mask: String,
    pub camera: CameraJson,
    pub flash: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posmap: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_normals: Option<String>,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthPaths>,
}

fn default_split() -> Split {
    Split::Train
}

fn default_width() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Binary PLY point cloud.
    pub points: String,
    #[serde(default = "default_width")]
    pub descriptor_width: usize,
    #[serde(default)]
    pub notes: String,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub cloud: PointCloud,
    pub frames: Vec<Frame>,
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

fn load_posmap(path: &Path) -> Result<Posmap> {
    let img = load_image(path, 2, false)?;
    if (img.height, img.width) != (UV_SIZE, UV_SIZE) {
        return Err(Error::Format(format!("{}: posmap must be {UV_SIZE}×{UV_SIZE}", path.display())));
    }
    let n = UV_SIZE * UV_SIZE;
    Posmap::new((0..n).map(|i| [img.data[i], img.data[n + i]]).collect())
}

fn posmap_image(p: &Posmap) -> Image {
    let n = UV_SIZE * UV_SIZE;
    let mut data = vec![0.0; 2 * n];
    for (i, c) in p.coords().iter().enumerate() {
        data[i] = c[0];
        data[n + i] = c[1];
    }
    Image::new(2, UV_SIZE, UV_SIZE, data).expect("chart shape")
}

/// Reads a manifest and every file it references. PNG images are treated
/// as sRGB; PNG masks as linear coverage.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = read_file(path)?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cloud_path = resolve(base, &manifest.points);
    let cloud = decode_ply(&read_file(&cloud_path)?).map_err(|e| Error::Format(format!("{}: {e}", cloud_path.display())))?;
    if manifest.frames.is_empty() {
        return Err(Error::Format(format!("{}: manifest lists no frames", path.display())));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, e) in manifest.frames.iter().enumerate() {
        let camera = e
            .camera
            .to_camera()
            .map_err(|err| Error::Format(format!("{}: frame {i}: {err}", path.display())))?;
        let image = load_image(&resolve(base, &e.image), 3, true)?;
        let mask = load_image(&resolve(base, &e.mask), 1, false)?;
        let posmap = e.posmap.as_ref().map(|p| load_posmap(&resolve(base, p))).transpose()?;
        let face_normals = e.face_normals.as_ref().map(|p| load_image(&resolve(base, p), 3, false)).transpose()?;
        let ground_truth = match &e.ground_truth {
            None => None,
            Some(g) => Some(HeadMaps {
                albedo: load_image(&resolve(base, &g.albedo), 3, false)?,
                normals: load_image(&resolve(base, &g.normals), 3, false)?,
                shadow: load_image(&resolve(base, &g.shadow), 1, false)?,
                mask: load_image(&resolve(base, &g.mask), 1, false)?,
            }),
        };
        let frame = Frame {
            image,
            mask,
            camera,
            flash: e.flash,
            posmap,
            face_normals,
            ground_truth,
            split: e.split,
        };
        frame
            .validate()
            .map_err(|err| Error::Format(format!("{}: frame {i}: {err}", path.display())))?;
        frames.push(frame);
    }
    Ok(Dataset { manifest, cloud, frames })
}

/// Writes a dataset as `manifest.json`, `points.ply` and `.f32` maps under
/// `dir`. Everything is staged in a sibling temp directory that is renamed
/// into place, so a failure leaves `dir` untouched. `dir` must not exist
/// or be empty.
pub fn save_dataset(dir: &Path, cloud: &PointCloud, frames: &[Frame], descriptor_width: usize, notes: &str) -> Result<PathBuf> {
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !empty {
            return Err(Error::invalid(format!("{} exists and is not empty", dir.display())));
        }
    }
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let stage = tempfile::Builder::new().prefix(".relit-stage").tempdir_in(&parent).map_err(|e| Error::io(&parent, e))?;
    let root = stage.path();
    write_atomic(&root.join("points.ply"), &encode_ply(cloud))?;
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = |kind: &str| format!("{i:04}_{kind}.f32");
        let put = |kind: &str, img: &Image| -> Result<String> {
            let n = name(kind);
            write_atomic(&root.join(&n), &encode_f32(img))?;
            Ok(n)
        };
        entries.push(FrameEntry {
            image: put("image", &f.image)?,
            mask: put("mask", &f.mask)?,
            camera: CameraJson::from_camera(&f.camera),
            flash: f.flash,
            posmap: f.posmap.as_ref().map(|p| put("posmap", &posmap_image(p))).transpose()?,
            face_normals: f.face_normals.as_ref().map(|n| put("face", n)).transpose()?,
            split: f.split,
            ground_truth: match &f.ground_truth {
                None => None,
                Some(g) => Some(GroundTruthPaths {
                    albedo: put("gt_albedo", &g.albedo)?,
                    normals: put("gt_normals", &g.normals)?,
                    shadow: put("gt_shadow", &g.shadow)?,
                    mask: put("gt_mask", &g.mask)?,
                }),
            },
        });
    }
    let manifest = Manifest {
        points: "points.ply".into(),
        descriptor_width,
        notes: notes.into(),
        frames: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("plain struct");
    write_atomic(&root.join("manifest.json"), &json)?;
    if dir.exists() {
        fs::remove_dir(dir).map_err(|e| Error::io(dir, e))?;
    }
    let staged = stage.keep();
    fs::rename(&staged, dir).map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        Error::io(dir, e)
    })?;
    Ok(dir.join("manifest.json"))
}
