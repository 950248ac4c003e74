//! Deterministic synthetic image-classification domains.
//!
//! Each class renders a motif whose geometry depends on the class index
//! (blob count, stripe frequency, ring frequency, checker cell count).
//! Domains differ through the motif family and the shift knobs: a global
//! intensity offset, quarter-turn rotation and pixel noise.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{Image, LabeledDataset, ModelError};
use crate::rng::{self, SplitMix64};

const BACKGROUND: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Motif {
    Blobs,
    Stripes,
    Rings,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    pub num_classes: usize,
    pub image_side: usize,
    pub motif: Motif,
    pub class_separation: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub intensity_shift: f64,
    #[serde(default)]
    pub rotation_steps: i32,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidRequest("a domain needs at least 2 classes".into()));
        }
        if self.image_side == 0 {
            return Err(ModelError::InvalidRequest("image_side must be positive".into()));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(ModelError::InvalidRequest("class_separation must be positive".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) || !self.intensity_shift.is_finite() {
            return Err(ModelError::InvalidRequest("noise_sd/intensity_shift must be finite, noise_sd ≥ 0".into()));
        }
        Ok(())
    }
}

/// Motif intensity in [0, 1] for class `k` at normalized
/// coordinates `(u, v)` ∈ (0, 1)².
fn motif_value(motif: Motif, k: usize, u: f64, v: f64) -> f64 {
    use std::f64::consts::PI;
    match motif {
        Motif::Blobs => (0..=k)
            .map(|j| {
                let theta = 2.0 * PI * j as f64 / (k + 1) as f64;
                let (cx, cy) = (0.5 + 0.3 * theta.cos(), 0.5 + 0.3 * theta.sin());
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                (-d2 / (2.0 * 0.08 * 0.08)).exp()
            })
            .fold(0.0, f64::max),
        Motif::Stripes => 0.5 + 0.5 * (2.0 * PI * (k + 1) as f64 * v).sin(),
        Motif::Rings => {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            0.5 + 0.5 * (4.0 * PI * (k + 1) as f64 * r).cos()
        }
        Motif::Checker => {
            let cells = (k + 2) as f64;
            (((u * cells).floor() + (v * cells).floor()) as i64 % 2) as f64
        }
    }
}

fn rotate_quarter(pixels: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for r in 0..side {
        for c in 0..side {
            out[r * side + c] = pixels[(side - 1 - c) * side + r];
        }
    }
    out
}

/// Noise-free class template after intensity shift and rotation (before
/// clamping).
fn template(spec: &DomainSpec, class: usize) -> Vec<f64> {
    let side = spec.image_side;
    let mut px = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let (u, v) = ((c as f64 + 0.5) / side as f64, (r as f64 + 0.5) / side as f64);
            let m = motif_value(spec.motif, class, u, v);
            px.push(BACKGROUND + spec.intensity_shift + spec.class_separation * m);
        }
    }
    for _ in 0..spec.rotation_steps.rem_euclid(4) {
        px = rotate_quarter(&px, side);
    }
    px
}

fn render(spec: &DomainSpec, templates: &[Vec<f64>], n: usize, mut rng: SplitMix64) -> LabeledDataset {
    let noise = (spec.noise_sd > 0.0).then(|| Normal::new(0.0, spec.noise_sd).expect("valid sd"));
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.num_classes;
        let pixels = templates[k]
            .iter()
            .map(|&t| {
                let e = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                (t + e).clamp(0.0, 1.0)
            })
            .collect();
        images.push(Image::new(spec.image_side, pixels).expect("side matches"));
        labels.push(k);
    }
    LabeledDataset::new(images, labels, spec.num_classes, spec.domain_id.clone())
        .expect("non-empty, labels in range")
}

/// Train and test splits for `spec`. Labels cycle through the classes so
/// class counts differ by at most one; the splits draw noise from distinct
/// substreams of `spec.seed`.
pub fn generate(
    spec: &DomainSpec,
    n_train: usize,
    n_test: usize,
) -> Result<(LabeledDataset, LabeledDataset), ModelError> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(ModelError::InvalidRequest("n_train and n_test must be positive".into()));
    }
    let templates: Vec<Vec<f64>> = (0..spec.num_classes).map(|k| template(spec, k)).collect();
    let train = render(spec, &templates, n_train, SplitMix64::seed_from_u64(rng::derive(spec.seed, 1)));
    let test = render(spec, &templates, n_test, SplitMix64::seed_from_u64(rng::derive(spec.seed, 2)));
    Ok((train, test))
}

/// `n` unlabeled images from `spec` (its training substream).
pub fn unlabeled(spec: &DomainSpec, n: usize) -> Result<Vec<Image>, ModelError> {
    spec.validate()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let templates: Vec<Vec<f64>> = (0..spec.num_classes).map(|k| template(spec, k)).collect();
    let data = render(spec, &templates, n, SplitMix64::seed_from_u64(rng::derive(spec.seed, 1)));
    Ok(data.images().to_vec())
}
