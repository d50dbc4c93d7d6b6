use crate::diff::{Real, Tensor};
use crate::error::{Error, Result};

/// Planar (channel-major) float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "image {channels}×{height}×{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.plane_len()..(c + 1) * self.plane_len()]
    }

    /// Pixel `(y, x)` as an array of three channels.
    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.at(0, y, x), self.at(1, y, x), self.at(2, y, x)]
    }

    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| S::from_f32(v).expect("finite")).collect(),
        )
        .expect("consistent image shape")
    }

    pub fn from_tensor<S: Real>(t: &Tensor<S>) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        Self::new(c, h, w, t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
    }

    /// Interleaved (H×W×C) copy of the data.
    pub fn to_interleaved(&self) -> Vec<f32> {
        let hw = self.plane_len();
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..hw {
            for c in 0..self.channels {
                out.push(self.data[c * hw + i]);
            }
        }
        out
    }

    pub fn from_interleaved(channels: usize, height: usize, width: usize, data: &[f32]) -> Result<Self> {
        let hw = height * width;
        if data.len() != hw * channels {
            return Err(Error::invalid("interleaved buffer size mismatch"));
        }
        let mut planar = vec![0.0; data.len()];
        for i in 0..hw {
            for c in 0..channels {
                planar[c * hw + i] = data[i * channels + c];
            }
        }
        Self::new(channels, height, width, planar)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the `h×w` window at `(y0, x0)`; pixels outside are zero.
    pub fn crop(&self, y0: isize, x0: isize, h: usize, w: usize) -> Image {
        let mut out = Image::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let sy = y0 + y as isize;
                if sy < 0 || sy >= self.height as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x0 + x as isize;
                    if sx >= 0 && sx < self.width as isize {
                        out.set(c, y, x, self.at(c, sy as usize, sx as usize));
                    }
                }
            }
        }
        out
    }
}
