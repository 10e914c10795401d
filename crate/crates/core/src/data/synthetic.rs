//! Synthetic multi-label images.
//!
//! Label `i` owns a plane wave at orientation `theta_i = i * pi / C`. Its
//! integer wave vector `round(f_i * (cos theta_i, sin theta_i))` makes the
//! patterns of distinct labels exactly orthogonal over the periodic grid as
//! long as no two vectors coincide or cancel, which `validate` checks.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

use super::manifest::{Manifest, Record};
use super::pgm::GrayImage;
use super::LABELS;

const MID_GRAY: f64 = 128.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub labels: usize,
    /// One value for every label, or one per label.
    pub prevalence: Vec<f64>,
    /// Spatial frequency in cycles per image; one value or one per label.
    pub frequency: Vec<f64>,
    /// Pattern amplitude as a fraction of full scale (255).
    pub amplitude: f64,
    /// Gaussian pixel-noise standard deviation as a fraction of full scale.
    pub noise_std: f64,
    pub images_per_patient: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            labels: 14,
            prevalence: vec![0.1],
            frequency: vec![6.0],
            amplitude: 0.12,
            noise_std: 0.05,
            images_per_patient: 2,
            seed: 0,
        }
    }
}

fn per_label(values: &[f64], labels: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; labels]),
        n if n == labels => Ok(values.to_vec()),
        n => Err(Error::Config(format!("{what}: expected 1 or {labels} values, got {n}"))),
    }
}

impl SyntheticSpec {
    pub fn prevalences(&self) -> Result<Vec<f64>> {
        per_label(&self.prevalence, self.labels, "prevalence")
    }

    /// Integer wave vector `(kx, ky)` of each label.
    pub fn wave_vectors(&self) -> Result<Vec<(i64, i64)>> {
        let f = per_label(&self.frequency, self.labels, "frequency")?;
        Ok((0..self.labels)
            .map(|i| {
                let theta = i as f64 * PI / self.labels as f64;
                ((f[i] * theta.cos()).round() as i64, (f[i] * theta.sin()).round() as i64)
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.labels == 0 || self.images_per_patient == 0 {
            return Err(Error::Config("image_size, labels and images_per_patient must be positive".into()));
        }
        if self.prevalences()?.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config("prevalences must lie in (0, 1)".into()));
        }
        if !(self.amplitude >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("amplitude and noise_std must be non-negative".into()));
        }
        let k = self.wave_vectors()?;
        let n = self.image_size as i64;
        let wrap = |v: i64| v.rem_euclid(n);
        for (i, &(ax, ay)) in k.iter().enumerate() {
            if wrap(ax) == 0 && wrap(ay) == 0 {
                return Err(Error::Config(format!("label {i} has a constant pattern; raise its frequency")));
            }
            if 2 * wrap(ax) % n == 0 && 2 * wrap(ay) % n == 0 {
                return Err(Error::Config(format!("label {i} pattern is at the Nyquist limit")));
            }
            for &(bx, by) in &k[..i] {
                let same = wrap(ax - bx) == 0 && wrap(ay - by) == 0;
                let opposite = wrap(ax + bx) == 0 && wrap(ay + by) == 0;
                if same || opposite {
                    return Err(Error::Config(format!("label {i} pattern aliases another label; change frequency or image size")));
                }
            }
        }
        Ok(())
    }

    /// Unit-amplitude pattern of `label`, row-major.
    pub fn pattern(&self, label: usize) -> Result<Vec<f64>> {
        let (kx, ky) = self.wave_vectors()?[label];
        let n = self.image_size;
        Ok((0..n * n)
            .map(|p| {
                let (x, y) = ((p % n) as f64, (p / n) as f64);
                (2.0 * PI * (kx as f64 * x + ky as f64 * y) / n as f64).cos()
            })
            .collect())
    }

    pub fn label_names(&self) -> Vec<String> {
        if self.labels == LABELS.len() {
            LABELS.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.labels).map(|i| format!("label_{i}")).collect()
        }
    }
}

/// Projection of `image - 128` onto the pattern of `label`, in units of the
/// configured amplitude: about 1 when the pattern is present, about 0 when
/// absent.
pub fn matched_filter(image: &GrayImage, spec: &SyntheticSpec, label: usize) -> Result<f64> {
    let p = spec.pattern(label)?;
    let dot: f64 = image.pixels().iter().zip(&p).map(|(&v, q)| (f64::from(v) - MID_GRAY) * q).sum();
    let norm: f64 = p.iter().map(|q| q * q).sum();
    Ok(dot / norm / (spec.amplitude * 255.0))
}

/// Images and their manifest. Per image, from the data stream of
/// `spec.seed`: one Bernoulli draw per label in label order, then one normal
/// draw per pixel. Image `j` belongs to patient `j mod ceil(n / per_patient)`.
pub fn generate_synthetic(spec: &SyntheticSpec, n_images: usize) -> Result<(Vec<GrayImage>, Manifest)> {
    spec.validate()?;
    let prev = spec.prevalences()?;
    let patterns = (0..spec.labels).map(|i| spec.pattern(i)).collect::<Result<Vec<_>>>()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let n_patients = n_images.div_ceil(spec.images_per_patient).max(1);
    let side = spec.image_size;
    let amp = spec.amplitude * 255.0;
    let noise = spec.noise_std * 255.0;
    let mut manifest = Manifest::new(spec.label_names());
    let mut images = Vec::with_capacity(n_images);
    for j in 0..n_images {
        let labels: Vec<u8> = prev.iter().map(|&p| u8::from(rng.random_bool(p))).collect();
        let mut field = vec![MID_GRAY; side * side];
        for (l, pat) in labels.iter().zip(&patterns) {
            if *l == 1 {
                field.iter_mut().zip(pat).for_each(|(v, q)| *v += amp * q);
            }
        }
        let pixels = field
            .into_iter()
            .map(|v| {
                let eps: f64 = rng.sample(StandardNormal);
                (v + noise * eps).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        images.push(GrayImage::new(side, side, pixels)?);
        manifest.push(Record { image_path: format!("img_{j:05}.pgm"), patient_id: format!("p{:05}", j % n_patients), labels })?;
    }
    Ok((images, manifest))
}

/// Add `N(0, std^2)` pixel noise (`std` as a fraction of full scale) and
/// re-quantize.
pub fn add_pixel_noise<R: Rng>(image: &GrayImage, std: f64, rng: &mut R) -> GrayImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let eps: f64 = rng.sample(StandardNormal);
        *p = (f64::from(*p) + std * 255.0 * eps).round().clamp(0.0, 255.0) as u8;
    }
    out
}
