//! Architecture descriptors and layout naming.

use serde::{Deserialize, Serialize};

use super::params::{LayoutEntry, TensorLayout};
use super::ModelError;

pub const PATCH_EMBED_W: &str = "patch_embed.weight";
pub const PATCH_EMBED_B: &str = "patch_embed.bias";
pub const ENCODER_FC1_W: &str = "encoder.fc1.weight";
pub const ENCODER_FC1_B: &str = "encoder.fc1.bias";
pub const ENCODER_FC2_W: &str = "encoder.fc2.weight";
pub const ENCODER_FC2_B: &str = "encoder.fc2.bias";
pub const HEAD_W: &str = "head.weight";
pub const HEAD_B: &str = "head.bias";

/// Prefix shared by every classification-head entry.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    BackboneOnly,
    BackboneWithHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pooling {
    #[default]
    MeanToken,
}

/// Patch-token backbone, optionally topped by a linear head.
///
/// The token pipeline is: linear patch embedding, fixed sinusoidal position
/// added, shared two-layer tanh MLP per token, mean over tokens, linear head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArchitecture {
    pub kind: ModelKind,
    pub patch_size: usize,
    pub image_side: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelArchitecture {
    pub fn backbone(
        patch_size: usize,
        image_side: usize,
        embed_dim: usize,
        encoder_hidden: usize,
    ) -> Result<Self, ModelError> {
        let arch = Self {
            kind: ModelKind::BackboneOnly,
            patch_size,
            image_side,
            embed_dim,
            encoder_hidden,
            num_classes: 0,
            pooling: Pooling::MeanToken,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_head(&self, num_classes: usize) -> Result<Self, ModelError> {
        let arch = Self { kind: ModelKind::BackboneWithHead, num_classes, ..*self };
        arch.validate()?;
        Ok(arch)
    }

    pub fn backbone_only(&self) -> Self {
        Self { kind: ModelKind::BackboneOnly, num_classes: 0, ..*self }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return Err(ModelError::InvalidArchitecture(format!(
                "image side {} must be a positive multiple of patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.encoder_hidden == 0 {
            return Err(ModelError::InvalidArchitecture(
                "embed_dim and encoder_hidden must be positive".into(),
            ));
        }
        match self.kind {
            ModelKind::BackboneOnly if self.num_classes != 0 => Err(
                ModelError::InvalidArchitecture("backbone-only model cannot have classes".into()),
            ),
            ModelKind::BackboneWithHead if self.num_classes < 2 => Err(
                ModelError::InvalidArchitecture("a head needs at least 2 classes".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_side / self.patch_size;
        g * g
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn backbone_layout(&self) -> TensorLayout {
        let (d, h, p) = (self.embed_dim, self.encoder_hidden, self.patch_len());
        TensorLayout::new(vec![
            LayoutEntry::new(PATCH_EMBED_W, vec![d, p]),
            LayoutEntry::new(PATCH_EMBED_B, vec![d]),
            LayoutEntry::new(ENCODER_FC1_W, vec![h, d]),
            LayoutEntry::new(ENCODER_FC1_B, vec![h]),
            LayoutEntry::new(ENCODER_FC2_W, vec![d, h]),
            LayoutEntry::new(ENCODER_FC2_B, vec![d]),
        ])
        .expect("validated architecture yields a valid layout")
    }

    pub fn head_layout(&self, num_classes: usize) -> TensorLayout {
        head_layout(num_classes, self.embed_dim)
    }

    pub fn layout(&self) -> TensorLayout {
        match self.kind {
            ModelKind::BackboneOnly => self.backbone_layout(),
            ModelKind::BackboneWithHead => self
                .backbone_layout()
                .concat(&self.head_layout(self.num_classes))
                .expect("head names are disjoint from backbone names"),
        }
    }

    /// Recovers the architecture from a layout plus the image side it will be
    /// fed. Checks that the layout is exactly what that architecture builds.
    pub fn infer(layout: &TensorLayout, image_side: usize) -> Result<Self, ModelError> {
        let dims = |name: &str| {
            layout
                .entry(name)
                .map(|e| e.dims.clone())
                .ok_or_else(|| ModelError::Layout(format!("missing entry `{name}`")))
        };
        let embed = dims(PATCH_EMBED_W)?;
        let fc1 = dims(ENCODER_FC1_W)?;
        if embed.len() != 2 || fc1.len() != 2 {
            return Err(ModelError::Layout("weight entries must be 2-D".into()));
        }
        let patch_size = (embed[1] as f64).sqrt().round() as usize;
        let mut arch = Self::backbone(patch_size, image_side, embed[0], fc1[0])?;
        if layout.contains(HEAD_W) {
            let head = dims(HEAD_W)?;
            arch = arch.with_head(head[0])?;
        }
        if arch.layout() != *layout {
            return Err(ModelError::Layout(
                "layout does not match any supported architecture".into(),
            ));
        }
        Ok(arch)
    }
}

pub fn head_layout(num_classes: usize, embed_dim: usize) -> TensorLayout {
    TensorLayout::new(vec![
        LayoutEntry::new(HEAD_W, vec![num_classes, embed_dim]),
        LayoutEntry::new(HEAD_B, vec![num_classes]),
    ])
    .expect("positive dims")
}

/// True when the layout carries any classification-head entry.
pub fn has_head(layout: &TensorLayout) -> bool {
    layout.entries().iter().any(|e| e.name.starts_with(HEAD_PREFIX))
}
