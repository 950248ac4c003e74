//! Grayscale images, labeled datasets and patch extraction.

use super::ModelError;

/// Square grayscale image stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self, ModelError> {
        if side == 0 || pixels.len() != side * side {
            return Err(ModelError::Shape(format!(
                "image side {side} needs {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        Ok(Self { side, pixels })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self { side, pixels: vec![value; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }
}

/// Splits `image` into non-overlapping `patch_size`×`patch_size` patches.
///
/// Patches are ordered row-major over the patch grid; each patch is itself a
/// row-major pixel vector of length `patch_size²`.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Vec<Vec<f64>>, ModelError> {
    let side = image.side();
    if patch_size == 0 || !side.is_multiple_of(patch_size) {
        return Err(ModelError::Shape(format!(
            "image side {side} is not divisible by patch size {patch_size}"
        )));
    }
    let grid = side / patch_size;
    let mut patches = Vec::with_capacity(grid * grid);
    for gr in 0..grid {
        for gc in 0..grid {
            let mut patch = Vec::with_capacity(patch_size * patch_size);
            for r in 0..patch_size {
                let start = (gr * patch_size + r) * side + gc * patch_size;
                patch.extend_from_slice(&image.pixels()[start..start + patch_size]);
            }
            patches.push(patch);
        }
    }
    Ok(patches)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Vec<f64>], patch_size: usize) -> Result<Image, ModelError> {
    let grid = (patches.len() as f64).sqrt().round() as usize;
    if patch_size == 0 || grid == 0 || grid * grid != patches.len() {
        return Err(ModelError::Shape(format!(
            "{} patches do not form a square grid",
            patches.len()
        )));
    }
    if let Some(p) = patches.iter().find(|p| p.len() != patch_size * patch_size) {
        return Err(ModelError::Shape(format!(
            "patch of length {} does not match patch size {patch_size}",
            p.len()
        )));
    }
    let side = grid * patch_size;
    let mut pixels = vec![0.0; side * side];
    for (i, patch) in patches.iter().enumerate() {
        let (gr, gc) = (i / grid, i % grid);
        for r in 0..patch_size {
            let start = (gr * patch_size + r) * side + gc * patch_size;
            pixels[start..start + patch_size]
                .copy_from_slice(&patch[r * patch_size..(r + 1) * patch_size]);
        }
    }
    Image::new(side, pixels)
}

/// Images with class labels from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
    domain_id: String,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        num_classes: usize,
        domain_id: impl Into<String>,
    ) -> Result<Self, ModelError> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(ModelError::Shape(format!(
                "{} images vs {} labels (need equal and non-zero)",
                images.len(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(ModelError::Shape("dataset needs at least one class".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ModelError::Shape(format!("label {l} out of range for {num_classes} classes")));
        }
        let side = images[0].side();
        if images.iter().any(|im| im.side() != side) {
            return Err(ModelError::Shape("images differ in size".into()));
        }
        Ok(Self { images, labels, num_classes, domain_id: domain_id.into() })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    /// Number of examples (M_i when this is a client's training split).
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_side(&self) -> usize {
        self.images[0].side()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }
}
