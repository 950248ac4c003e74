use rand::Rng;

use crate::model::ModelError;

/// Partition of patch indices into visible (fed to the encoder) and masked
/// (reconstructed by the decoder). Both lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    num_patches: usize,
    visible: Vec<usize>,
    masked: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from explicit index sets, checking that they partition
    /// `0..num_patches`.
    pub fn new(
        num_patches: usize,
        mut visible: Vec<usize>,
        mut masked: Vec<usize>,
    ) -> Result<Self, ModelError> {
        visible.sort_unstable();
        masked.sort_unstable();
        let mut seen = vec![false; num_patches];
        for &i in visible.iter().chain(&masked) {
            if i >= num_patches || seen[i] {
                return Err(ModelError::Shape(format!(
                    "patch index {i} repeated or outside 0..{num_patches}"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(ModelError::Shape("visible and masked do not cover every patch".into()));
        }
        Ok(Self { num_patches, visible, masked })
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn is_visible(&self, index: usize) -> bool {
        self.visible.binary_search(&index).is_ok()
    }
}

/// Number of visible patches: `round(fraction · n)` clamped to `[1, n]`.
pub fn visible_count(num_patches: usize, visible_fraction: f64) -> usize {
    let k = (visible_fraction * num_patches as f64).round();
    let k = if k.is_nan() { 0 } else { k as usize };
    k.clamp(1, num_patches.max(1))
}

/// Uniform random visible subset via a partial Fisher–Yates shuffle.
pub fn sample_mask<R: Rng + ?Sized>(
    num_patches: usize,
    visible_fraction: f64,
    rng: &mut R,
) -> MaskPlan {
    assert!(num_patches >= 1, "need at least one patch");
    let k = visible_count(num_patches, visible_fraction);
    let mut idx: Vec<usize> = (0..num_patches).collect();
    for i in 0..k {
        let j = rng.random_range(i..num_patches);
        idx.swap(i, j);
    }
    let mut visible = idx[..k].to_vec();
    let mut masked = idx[k..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    MaskPlan { num_patches, visible, masked }
}
