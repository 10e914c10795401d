//! Resize → center crop → 3-channel replication → `[0, 1]` scaling →
//! per-channel `(x - mean) / std`. No augmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::pgm::GrayImage;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Square resize target; `None` keeps the input size.
    pub resize: Option<usize>,
    /// Square center-crop size; `None` keeps the resized size.
    pub crop: Option<usize>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { resize: Some(256), crop: Some(224), mean: IMAGENET_MEAN, std: IMAGENET_STD }
    }
}

impl PreprocessConfig {
    /// Identity geometry with the standard normalization.
    pub fn identity_geometry() -> Self {
        Self { resize: None, crop: None, ..Self::default() }
    }

    /// Side length of the output for a `width x height` input, if valid.
    pub fn output_size(&self, width: usize, height: usize) -> Result<usize> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("degenerate image size {width}x{height}")));
        }
        let resized = match self.resize {
            Some(0) => return Err(Error::Config("resize must be positive".into())),
            Some(r) => r,
            None if width == height => width,
            None => return Err(Error::Config(format!("non-square {width}x{height} image needs a resize"))),
        };
        match self.crop {
            Some(0) => Err(Error::Config("crop must be positive".into())),
            Some(c) if c > resized => Err(Error::Config(format!("crop {c} exceeds resized size {resized}"))),
            Some(c) => Ok(c),
            None => Ok(resized),
        }
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let taps = |out: usize, size: usize| -> Vec<(usize, usize, f64)> {
        let scale = size as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(size - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(out_w, width);
    let ys = taps(out_h, height);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = (1.0 - fx) * src[y0 * width + x0] + fx * src[y0 * width + x1];
            let bottom = (1.0 - fx) * src[y1 * width + x0] + fx * src[y1 * width + x1];
            out.push((1.0 - fy) * top + fy * bottom);
        }
    }
    out
}

/// Preprocess one image into a `[3, S, S]` tensor.
pub fn preprocess<T: Scalar>(image: &GrayImage, config: &PreprocessConfig) -> Result<Tensor<T>> {
    let (w, h) = (image.width(), image.height());
    let out = config.output_size(w, h)?;
    let raw: Vec<f64> = image.pixels().iter().map(|&p| f64::from(p)).collect();
    let (resized, r) = match config.resize {
        Some(r) if r != w || r != h => (resize_bilinear(&raw, w, h, r, r), r),
        _ => (raw, w),
    };
    let off = (r - out) / 2;
    let mut data = Vec::with_capacity(3 * out * out);
    for c in 0..3 {
        let (m, s) = (config.mean[c], config.std[c]);
        for y in 0..out {
            for x in 0..out {
                let v = resized[(y + off) * r + x + off] / 255.0;
                data.push(T::of((v - m) / s));
            }
        }
    }
    Tensor::new(vec![3, out, out], data)
}
