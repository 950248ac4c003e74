//! Minimal neural-network substrate shared by pre-training and fine-tuning.

mod arch;
mod image;
pub(crate) mod nn;
mod params;
mod train;


pub use arch::{
    has_head, head_layout, ModelArchitecture, ModelKind, Pooling, ENCODER_FC1_B, ENCODER_FC1_W,
    ENCODER_FC2_B, ENCODER_FC2_W, HEAD_B, HEAD_PREFIX, HEAD_W, PATCH_EMBED_B, PATCH_EMBED_W,
};
pub use image::{patchify, unpatchify, Image, LabeledDataset};
pub use nn::sinusoidal_positions;
pub use params::{LayoutEntry, ParameterSet, TensorLayout};
pub use train::{evaluate, forward, gradient, predict, train_sgd, SgdConfig};

use rand::Rng;
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged in epoch {epoch}")]
    TrainingDiverged { epoch: usize },
}

/// Draws every entry of `layout` in order from one stream: entries named
/// `*.bias` are zero, everything else is Uniform(±1/√fan_in) where fan_in is
/// the last dimension.
pub(crate) fn init_layout(layout: &TensorLayout, seed: u64) -> ParameterSet {
    let mut rng = rng::stream(seed);
    let mut values = Vec::with_capacity(layout.total());
    for e in layout.entries() {
        if e.name.ends_with(".bias") {
            values.extend(std::iter::repeat_n(0.0, e.numel()));
        } else {
            let fan_in = *e.dims.last().expect("non-empty dims") as f64;
            let bound = 1.0 / fan_in.sqrt();
            values.extend((0..e.numel()).map(|_| rng.random_range(-bound..bound)));
        }
    }
    ParameterSet::new(layout.clone(), values).expect("finite draws")
}

/// Fresh weights for `arch`, deterministic in `seed`.
pub fn init_model(arch: &ModelArchitecture, seed: u64) -> ParameterSet {
    init_layout(&arch.layout(), seed)
}

/// Appends a randomly initialized `num_classes`-way linear head to a
/// backbone-only parameter set. The backbone values are copied bit-exactly.
pub fn attach_head(
    base: &ParameterSet,
    num_classes: usize,
    seed: u64,
) -> Result<ParameterSet, ModelError> {
    if num_classes < 2 {
        return Err(ModelError::InvalidRequest(format!(
            "a head needs at least 2 classes, got {num_classes}"
        )));
    }
    if has_head(base.layout()) {
        return Err(ModelError::InvalidRequest("base already carries a head".into()));
    }
    let embed_dim = base
        .layout()
        .entry(PATCH_EMBED_W)
        .map(|e| e.dims[0])
        .ok_or_else(|| ModelError::Layout(format!("missing entry `{PATCH_EMBED_W}`")))?;
    let head = init_layout(&head_layout(num_classes, embed_dim), seed);
    base.concat(&head)
}

/// Drops every head entry, leaving the backbone in its original order.
pub fn strip_head(model: &ParameterSet) -> Result<ParameterSet, ModelError> {
    let keep: Vec<LayoutEntry> = model
        .layout()
        .entries()
        .iter()
        .filter(|e| !e.name.starts_with(HEAD_PREFIX))
        .cloned()
        .collect();
    model.restrict(&TensorLayout::new(keep)?)
}
