//! Classifier forward, gradients, SGD and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::arch::{has_head, HEAD_PREFIX, PATCH_EMBED_W};
use super::image::{patchify, Image, LabeledDataset};
use super::nn::{argmax, Classifier};
use super::params::ParameterSet;
use super::ModelError;
use crate::rng;

fn patch_size_of(model: &ParameterSet) -> Result<usize, ModelError> {
    let e = model
        .layout()
        .entry(PATCH_EMBED_W)
        .ok_or_else(|| ModelError::Layout(format!("missing entry `{PATCH_EMBED_W}`")))?;
    let p = (e.dims[1] as f64).sqrt().round() as usize;
    if p * p != e.dims[1] {
        return Err(ModelError::Layout("patch embedding input is not a square patch".into()));
    }
    Ok(p)
}

fn bind(model: &ParameterSet, image_side: usize) -> Result<(Classifier, usize), ModelError> {
    if !has_head(model.layout()) {
        return Err(ModelError::Shape("model has no classification head".into()));
    }
    let patch = patch_size_of(model)?;
    if !image_side.is_multiple_of(patch) {
        return Err(ModelError::Shape(format!(
            "image side {image_side} is not divisible by patch size {patch}"
        )));
    }
    let grid = image_side / patch;
    Ok((Classifier::bind(model.layout(), grid * grid)?, patch))
}

/// Class logits for one image.
pub fn forward(model: &ParameterSet, image: &Image) -> Result<Vec<f64>, ModelError> {
    let (clf, patch) = bind(model, image.side())?;
    clf.logits(model.values(), &patchify(image, patch)?)
}

pub fn predict(model: &ParameterSet, image: &Image) -> Result<usize, ModelError> {
    forward(model, image).map(|l| argmax(&l))
}

/// Mean cross-entropy over `batch` and its gradient, laid out like `model`.
pub fn gradient(
    model: &ParameterSet,
    batch: &[(&Image, usize)],
) -> Result<(f64, Vec<f64>), ModelError> {
    let first = batch.first().ok_or_else(|| ModelError::Shape("empty batch".into()))?;
    let (clf, patch) = bind(model, first.0.side())?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.len()];
    let mut loss = 0.0;
    for (image, label) in batch {
        loss += clf.accumulate(model.values(), &patchify(image, patch)?, *label, scale, &mut grad)?;
    }
    Ok((loss * scale, grad))
}

/// Minibatch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub freeze_backbone: bool,
}

/// Trains `model` on `data`; returns the trained parameters and the mean
/// cross-entropy of each epoch.
///
/// Examples are reshuffled every epoch from the `seed` stream. With
/// `freeze_backbone` only head entries move.
pub fn train_sgd(
    model: &ParameterSet,
    data: &LabeledDataset,
    config: &SgdConfig,
) -> Result<(ParameterSet, Vec<f64>), ModelError> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(ModelError::InvalidRequest("epochs and batch_size must be positive".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(ModelError::InvalidRequest(format!("bad learning rate {}", config.lr)));
    }
    let (clf, patch) = bind(model, data.image_side())?;
    if clf.num_classes() != data.num_classes() {
        return Err(ModelError::Shape(format!(
            "model has {} classes, data has {}",
            clf.num_classes(),
            data.num_classes()
        )));
    }
    let patches = data
        .images()
        .iter()
        .map(|im| patchify(im, patch))
        .collect::<Result<Vec<_>, _>>()?;

    let trainable: Vec<bool> = {
        let mut mask = vec![!config.freeze_backbone; model.len()];
        for e in model.layout().entries() {
            if e.name.starts_with(HEAD_PREFIX) {
                let r = model.layout().range(&e.name).expect("entry exists");
                mask[r].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    };

    let mut params = model.clone();
    let mut rng = rng::stream(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut grad = vec![0.0; params.len()];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss +=
                    clf.accumulate(params.values(), &patches[i], data.labels()[i], scale, &mut grad)?;
            }
            if !epoch_loss.is_finite() {
                return Err(ModelError::TrainingDiverged { epoch });
            }
            if config.lr != 0.0 {
                for ((v, g), &t) in params.values_mut().iter_mut().zip(&grad).zip(&trainable) {
                    if t {
                        *v -= config.lr * g;
                    }
                }
                if !params.all_finite() {
                    return Err(ModelError::TrainingDiverged { epoch });
                }
            }
        }
        history.push(epoch_loss / data.len() as f64);
    }
    Ok((params, history))
}

/// Fraction of examples whose argmax logit equals the label.
pub fn evaluate(model: &ParameterSet, data: &LabeledDataset) -> Result<f64, ModelError> {
    let (clf, patch) = bind(model, data.image_side())?;
    if clf.num_classes() != data.num_classes() {
        return Err(ModelError::Shape(format!(
            "model has {} classes, data has {}",
            clf.num_classes(),
            data.num_classes()
        )));
    }
    let mut correct = 0usize;
    for (image, label) in data.iter() {
        if argmax(&clf.logits(model.values(), &patchify(image, patch)?)?) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
