//! Masked-patch reconstruction pre-training of the server backbone.
//!
//! A random ~25% of patches stay visible and go through the backbone; the
//! decoder sees those encodings plus a shared learnable mask token at every
//! hidden position and regresses the hidden patches' raw pixels. Only the
//! backbone survives pre-training.

mod mask;
mod net;

pub use crate::model::{patchify, unpatchify};
pub use mask::{sample_mask, visible_count, MaskPlan};
pub use net::{
    mim_layout, DECODER_FC1_B, DECODER_FC1_W, DECODER_FC2_B, DECODER_FC2_W, DECODER_MIX_W,
    MASK_TOKEN,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::{init_model, Image, ModelArchitecture, ModelError, ModelKind, ParameterSet};
use crate::rng;
use net::MimNet;

fn default_visible_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MimConfig {
    #[serde(default = "default_visible_fraction")]
    pub visible_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub decoder_hidden: usize,
}

impl MimConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.visible_fraction > 0.0 && self.visible_fraction <= 1.0) {
            return Err(ModelError::InvalidRequest(format!(
                "visible_fraction {} outside (0, 1]",
                self.visible_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decoder_hidden == 0 {
            return Err(ModelError::InvalidRequest(
                "epochs, batch_size and decoder_hidden must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ModelError::InvalidRequest(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Reconstructed pixels for each masked position of `plan`, in
/// `plan.masked()` order.
pub fn mim_forward(
    params: &ParameterSet,
    patches: &[Vec<f64>],
    plan: &MaskPlan,
) -> Result<Vec<Vec<f64>>, ModelError> {
    MimNet::bind(params.layout(), patches.len())?.predict_ordered(
        params.values(),
        patches,
        plan,
        plan.visible(),
    )
}

/// Mean squared error over the pixels of masked patches only.
pub fn mim_loss(
    predictions: &[Vec<f64>],
    patches: &[Vec<f64>],
    plan: &MaskPlan,
) -> Result<f64, ModelError> {
    if predictions.len() != plan.masked().len() || patches.len() != plan.num_patches() {
        return Err(ModelError::Shape(format!(
            "{} predictions for {} masked patches",
            predictions.len(),
            plan.masked().len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pred, &t) in predictions.iter().zip(plan.masked()) {
        if pred.len() != patches[t].len() {
            return Err(ModelError::Shape(format!("prediction for patch {t} has wrong length")));
        }
        sum += pred.iter().zip(&patches[t]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += pred.len();
    }
    Ok(sum / count as f64)
}

/// Mean reconstruction loss over `batch` and its gradient w.r.t. every entry
/// of `params` (encoder, decoder and mask token).
pub fn mim_gradient(
    params: &ParameterSet,
    batch: &[(Vec<Vec<f64>>, MaskPlan)],
) -> Result<(f64, Vec<f64>), ModelError> {
    let first = batch.first().ok_or_else(|| ModelError::Shape("empty batch".into()))?;
    let net = MimNet::bind(params.layout(), first.0.len())?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (patches, plan) in batch {
        loss += net.accumulate(params.values(), patches, patches, plan, scale, &mut grad)?;
    }
    Ok((loss * scale, grad))
}

/// Initial MIM parameters: the backbone prefix equals `init_model(arch, seed)`.
pub fn init_mim(
    arch: &ModelArchitecture,
    decoder_hidden: usize,
    seed: u64,
) -> Result<ParameterSet, ModelError> {
    let layout = mim_layout(arch, decoder_hidden)?;
    let params = crate::model::init_layout(&layout, seed);
    debug_assert_eq!(
        &params.values()[..arch.backbone_layout().total()],
        init_model(&arch.backbone_only(), seed).values()
    );
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    /// Backbone-only weights; decoder and mask token are dropped.
    pub encoder: ParameterSet,
    /// Mean per-image reconstruction loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Pre-trains a backbone on unlabeled `images` with masked-patch
/// reconstruction.
pub fn pretrain(
    images: &[Image],
    arch: &ModelArchitecture,
    config: &MimConfig,
) -> Result<PretrainOutcome, ModelError> {
    config.validate()?;
    if arch.kind != ModelKind::BackboneOnly {
        return Err(ModelError::InvalidArchitecture("pre-training needs a backbone-only arch".into()));
    }
    arch.validate()?;
    if images.is_empty() {
        return Err(ModelError::InvalidRequest("no images to pre-train on".into()));
    }
    let patches = images
        .iter()
        .map(|im| {
            if im.side() != arch.image_side {
                return Err(ModelError::Shape(format!(
                    "image side {} does not match architecture side {}",
                    im.side(),
                    arch.image_side
                )));
            }
            patchify(im, arch.patch_size)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut params = init_mim(arch, config.decoder_hidden, config.seed)?;
    let n = arch.num_patches();
    let net = MimNet::bind(params.layout(), n)?;
    let mut rng = rng::stream(config.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut grad = vec![0.0; params.len()];
    let mut loss_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let plan = sample_mask(n, config.visible_fraction, &mut rng);
                epoch_loss += net.accumulate(
                    params.values(),
                    &patches[i],
                    &patches[i],
                    &plan,
                    scale,
                    &mut grad,
                )?;
            }
            if config.lr > 0.0 {
                for (v, g) in params.values_mut().iter_mut().zip(&grad) {
                    *v -= config.lr * g;
                }
            }
            if !epoch_loss.is_finite() || !params.all_finite() {
                return Err(ModelError::TrainingDiverged { epoch });
            }
        }
        loss_history.push(epoch_loss / images.len() as f64);
    }
    let encoder = params.restrict(&arch.backbone_layout())?;
    Ok(PretrainOutcome { encoder, loss_history })
}
