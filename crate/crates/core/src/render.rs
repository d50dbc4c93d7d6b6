//! Offline render path shared by the CLI, the evaluator and the service.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lighting::{
    compose_original, relight_additional_point, relight_directional, relight_sh, Flash, FlashRays,
    LightingOptions, LightingSpec,
};
use crate::net::{forward, HeadMaps};
use crate::raster::{build_pyramid, DEFAULT_Z_NEAR};
use crate::scene::{flash_distance, Camera, SceneModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub lighting: LightingOptions,
    /// Black out pixels whose predicted mask is below 0.5.
    pub matte_with_mask: bool,
    pub z_near: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            lighting: LightingOptions::default(),
            matte_with_mask: true,
            z_near: DEFAULT_Z_NEAR,
        }
    }
}

/// Network heads for `camera`.
pub fn render_heads(model: &SceneModel, camera: &Camera, z_near: f64) -> Result<HeadMaps> {
    let pyramid = build_pyramid(&model.cloud, &model.descriptors, camera, model.net_config.levels, z_near)?;
    forward(&model.net_config, &model.net_params, &pyramid)
}

/// Flash geometry of a view: nearest-point distance and rays.
pub fn flash_for(model: &SceneModel, camera: &Camera, opts: &LightingOptions) -> Result<Flash> {
    let distance = flash_distance(camera, &model.cloud)?;
    if !(distance > 0.0) {
        return Err(Error::invalid("camera center coincides with a cloud point"));
    }
    Ok(Flash {
        distance,
        rays: FlashRays::for_camera(camera, opts.per_pixel_rays),
    })
}

/// Zeroes pixels with `mask < 0.5`.
pub fn matte(img: &mut Image, mask: &Image) {
    let hw = img.plane_len();
    for c in 0..img.channels {
        for i in 0..hw {
            if mask.data[i] < 0.5 {
                img.data[c * hw + i] = 0.0;
            }
        }
    }
}

/// Applies `spec` to already computed heads.
pub fn shade(
    model: &SceneModel,
    camera: &Camera,
    heads: &HeadMaps,
    spec: &LightingSpec,
    opts: &RenderOptions,
) -> Result<Image> {
    let mut img = match spec.normalized()? {
        LightingSpec::Original { flash } => {
            let f = if flash { Some(flash_for(model, camera, &opts.lighting)?) } else { None };
            compose_original(heads, &model.lights, f.as_ref(), &opts.lighting)?
        }
        LightingSpec::DirectionalAmbient { direction, ambient, color } => {
            relight_directional(heads, direction, ambient, color)?
        }
        LightingSpec::AdditionalPoint { direction, distance, color } => {
            relight_additional_point(heads, &model.lights, direction, distance, color)?
        }
        LightingSpec::Sh { coefficients } => relight_sh(heads, &coefficients)?,
    };
    if opts.matte_with_mask {
        matte(&mut img, &heads.mask);
    }
    Ok(img)
}

/// Rasterize, run the network and light the result.
pub fn render(model: &SceneModel, camera: &Camera, spec: &LightingSpec, opts: &RenderOptions) -> Result<Image> {
    camera.validate(1e-6)?;
    let heads = render_heads(model, camera, opts.z_near)?;
    shade(model, camera, &heads, spec, opts)
}
