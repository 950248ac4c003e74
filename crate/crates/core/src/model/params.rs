//! Flat, layout-tagged parameter storage.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// One named tensor inside a [`TensorLayout`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

impl LayoutEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>) -> Self {
        Self { name: name.into(), dims }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Ordered list of named tensors. Two layouts are compatible iff their entry
/// lists are identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLayout {
    entries: Vec<LayoutEntry>,
    offsets: Vec<usize>,
    total: usize,
}

impl TensorLayout {
    pub fn new(entries: Vec<LayoutEntry>) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::Layout("layout has no entries".into()));
        }
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0usize;
        for (i, e) in entries.iter().enumerate() {
            if e.dims.is_empty() || e.dims.contains(&0) {
                return Err(ModelError::Layout(format!(
                    "entry `{}` has non-positive dims {:?}",
                    e.name, e.dims
                )));
            }
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(ModelError::Layout(format!("duplicate entry `{}`", e.name)));
            }
            offsets.push(total);
            total = e
                .dims
                .iter()
                .try_fold(1usize, |p, &d| p.checked_mul(d))
                .and_then(|n| total.checked_add(n))
                .ok_or_else(|| ModelError::Layout("parameter count overflows".into()))?;
        }
        Ok(Self { entries, offsets, total })
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn contains(&self, name: &str) -> bool {
        self.position(name).is_some()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.position(name).map(|i| &self.entries[i])
    }

    /// Flat index range occupied by `name`.
    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.position(name).map(|i| {
            let start = self.offsets[i];
            start..start + self.entries[i].numel()
        })
    }

    pub fn is_compatible(&self, other: &TensorLayout) -> bool {
        self.entries == other.entries
    }

    /// Layout made of `self`'s entries followed by `other`'s.
    pub fn concat(&self, other: &TensorLayout) -> Result<TensorLayout, ModelError> {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().cloned());
        TensorLayout::new(entries)
    }
}

/// Model weights as one flat `f64` vector plus the layout describing it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    layout: TensorLayout,
    values: Vec<f64>,
}

impl ParameterSet {
    pub fn new(layout: TensorLayout, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != layout.total() {
            return Err(ModelError::Shape(format!(
                "layout expects {} values, got {}",
                layout.total(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(format!("value {i} is {}", values[i])));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: TensorLayout) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    pub fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw values. Callers are responsible for keeping
    /// them finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.range(name).map(|r| &self.values[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.layout.range(name).map(move |r| &mut self.values[r])
    }

    /// Copies out the entries of `target` (by name) into a new set laid out as
    /// `target`. Every entry must exist here with identical dims.
    pub fn restrict(&self, target: &TensorLayout) -> Result<ParameterSet, ModelError> {
        let mut values = Vec::with_capacity(target.total());
        for e in target.entries() {
            let mine = self
                .layout
                .entry(&e.name)
                .ok_or_else(|| ModelError::Layout(format!("missing entry `{}`", e.name)))?;
            if mine.dims != e.dims {
                return Err(ModelError::Layout(format!(
                    "entry `{}` has dims {:?}, expected {:?}",
                    e.name, mine.dims, e.dims
                )));
            }
            values.extend_from_slice(self.tensor(&e.name).expect("entry exists"));
        }
        Ok(ParameterSet { layout: target.clone(), values })
    }

    /// Appends `other`'s entries after this set's.
    pub fn concat(&self, other: &ParameterSet) -> Result<ParameterSet, ModelError> {
        let layout = self.layout.concat(&other.layout)?;
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(ParameterSet { layout, values })
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
