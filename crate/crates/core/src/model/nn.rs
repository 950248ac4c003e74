//! Forward and backward passes over a flat parameter vector.
//!
//! Layers hold index ranges into the flat vector rather than owned weights,
//! so one parameter buffer and one gradient buffer of the same layout serve
//! every layer.

use std::ops::Range;

use super::arch::{
    ENCODER_FC1_B, ENCODER_FC1_W, ENCODER_FC2_B, ENCODER_FC2_W, HEAD_B, HEAD_W, PATCH_EMBED_B,
    PATCH_EMBED_W,
};
use super::params::TensorLayout;
use super::ModelError;

/// Fixed sinusoidal position table: `pe[t][2i] = sin(t / 10000^(2i/d))`,
/// `pe[t][2i+1] = cos(t / 10000^(2i/d))`.
pub fn sinusoidal_positions(num_tokens: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..num_tokens)
        .map(|t| {
            (0..dim)
                .map(|j| {
                    let pair = (j / 2 * 2) as f64;
                    let angle = t as f64 / 10000f64.powf(pair / dim as f64);
                    if j % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// `y = W x (+ b)` with `W` stored row-major as `[out, inp]`.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    w: Range<usize>,
    b: Option<Range<usize>>,
    pub(crate) out: usize,
    pub(crate) inp: usize,
}

impl Dense {
    pub(crate) fn bind(
        layout: &TensorLayout,
        weight: &str,
        bias: Option<&str>,
    ) -> Result<Self, ModelError> {
        let e = layout
            .entry(weight)
            .ok_or_else(|| ModelError::Layout(format!("missing entry `{weight}`")))?;
        if e.dims.len() != 2 {
            return Err(ModelError::Layout(format!("`{weight}` must be 2-D")));
        }
        let (out, inp) = (e.dims[0], e.dims[1]);
        let b = match bias {
            Some(name) => {
                let be = layout
                    .entry(name)
                    .ok_or_else(|| ModelError::Layout(format!("missing entry `{name}`")))?;
                if be.dims != [out] {
                    return Err(ModelError::Layout(format!("`{name}` must have dims [{out}]")));
                }
                layout.range(name)
            }
            None => None,
        };
        Ok(Self { w: layout.range(weight).expect("entry exists"), b, out, inp })
    }

    pub(crate) fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        let w = &p[self.w.clone()];
        let mut y = match &self.b {
            Some(b) => p[b.clone()].to_vec(),
            None => vec![0.0; self.out],
        };
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.inp..(o + 1) * self.inp];
            *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        y
    }

    /// Accumulates `dW += gy xᵀ`, `db += gy` into `grad` and returns `Wᵀ gy`.
    pub(crate) fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let gx = self.input_grad(p, gy);
        self.param_grad(x, gy, grad);
        gx
    }

    pub(crate) fn param_grad(&self, x: &[f64], gy: &[f64], grad: &mut [f64]) {
        let gw = &mut grad[self.w.clone()];
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (dst, &xi) in gw[o * self.inp..(o + 1) * self.inp].iter_mut().zip(x) {
                *dst += g * xi;
            }
        }
        if let Some(b) = &self.b {
            for (dst, &g) in grad[b.clone()].iter_mut().zip(gy) {
                *dst += g;
            }
        }
    }

    pub(crate) fn input_grad(&self, p: &[f64], gy: &[f64]) -> Vec<f64> {
        let w = &p[self.w.clone()];
        let mut gx = vec![0.0; self.inp];
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (dst, &wi) in gx.iter_mut().zip(&w[o * self.inp..(o + 1) * self.inp]) {
                *dst += g * wi;
            }
        }
        gx
    }
}

/// Two dense layers with a tanh in between, applied to one token.
#[derive(Debug, Clone)]
pub(crate) struct TanhMlp {
    fc1: Dense,
    fc2: Dense,
}

impl TanhMlp {
    pub(crate) fn bind(
        layout: &TensorLayout,
        fc1: (&str, &str),
        fc2: (&str, &str),
    ) -> Result<Self, ModelError> {
        let fc1 = Dense::bind(layout, fc1.0, Some(fc1.1))?;
        let fc2 = Dense::bind(layout, fc2.0, Some(fc2.1))?;
        if fc2.inp != fc1.out {
            return Err(ModelError::Layout("MLP hidden sizes disagree".into()));
        }
        Ok(Self { fc1, fc2 })
    }

    pub(crate) fn input_dim(&self) -> usize {
        self.fc1.inp
    }

    pub(crate) fn output_dim(&self) -> usize {
        self.fc2.out
    }

    /// Returns `(hidden activations, output)`.
    pub(crate) fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = self.fc1.forward(p, x);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let y = self.fc2.forward(p, &h);
        (h, y)
    }

    pub(crate) fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        h: &[f64],
        gy: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let mut gh = self.fc2.backward(p, h, gy, grad);
        for (g, &hv) in gh.iter_mut().zip(h) {
            *g *= 1.0 - hv * hv;
        }
        self.fc1.backward(p, x, &gh, grad)
    }
}

/// Intermediate values of one token through the backbone.
#[derive(Debug, Clone)]
pub(crate) struct TokenTrace {
    pub(crate) embedded: Vec<f64>,
    pub(crate) hidden: Vec<f64>,
    pub(crate) output: Vec<f64>,
}

/// Patch embedding plus per-token encoder MLP.
#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    embed: Dense,
    mlp: TanhMlp,
}

impl Backbone {
    pub(crate) fn bind(layout: &TensorLayout) -> Result<Self, ModelError> {
        let embed = Dense::bind(layout, PATCH_EMBED_W, Some(PATCH_EMBED_B))?;
        let mlp = TanhMlp::bind(
            layout,
            (ENCODER_FC1_W, ENCODER_FC1_B),
            (ENCODER_FC2_W, ENCODER_FC2_B),
        )?;
        if mlp.input_dim() != embed.out || mlp.output_dim() != embed.out {
            return Err(ModelError::Layout("encoder width disagrees with embedding".into()));
        }
        Ok(Self { embed, mlp })
    }

    pub(crate) fn embed_dim(&self) -> usize {
        self.embed.out
    }

    pub(crate) fn patch_len(&self) -> usize {
        self.embed.inp
    }

    pub(crate) fn encode(&self, p: &[f64], patch: &[f64], position: &[f64]) -> TokenTrace {
        let mut embedded = self.embed.forward(p, patch);
        for (e, &pe) in embedded.iter_mut().zip(position) {
            *e += pe;
        }
        let (hidden, output) = self.mlp.forward(p, &embedded);
        TokenTrace { embedded, hidden, output }
    }

    /// Backpropagates `g_output` of one token into parameter gradients.
    pub(crate) fn backward(
        &self,
        p: &[f64],
        patch: &[f64],
        trace: &TokenTrace,
        g_output: &[f64],
        grad: &mut [f64],
    ) {
        let g_embedded = self.mlp.backward(p, &trace.embedded, &trace.hidden, g_output, grad);
        self.embed.param_grad(patch, &g_embedded, grad);
    }
}

/// Backbone, mean pooling and a linear head.
#[derive(Debug, Clone)]
pub(crate) struct Classifier {
    backbone: Backbone,
    head: Dense,
    positions: Vec<Vec<f64>>,
}

impl Classifier {
    pub(crate) fn bind(layout: &TensorLayout, num_patches: usize) -> Result<Self, ModelError> {
        let backbone = Backbone::bind(layout)?;
        let head = Dense::bind(layout, HEAD_W, Some(HEAD_B))?;
        if head.inp != backbone.embed_dim() {
            return Err(ModelError::Layout("head width disagrees with embedding".into()));
        }
        let positions = sinusoidal_positions(num_patches, backbone.embed_dim());
        Ok(Self { backbone, head, positions })
    }

    pub(crate) fn num_classes(&self) -> usize {
        self.head.out
    }

    pub(crate) fn patch_len(&self) -> usize {
        self.backbone.patch_len()
    }

    fn check_patches(&self, patches: &[Vec<f64>]) -> Result<(), ModelError> {
        if patches.len() != self.positions.len()
            || patches.iter().any(|q| q.len() != self.patch_len())
        {
            return Err(ModelError::Shape(format!(
                "expected {} patches of {} pixels",
                self.positions.len(),
                self.patch_len()
            )));
        }
        Ok(())
    }

    fn run(&self, p: &[f64], patches: &[Vec<f64>]) -> (Vec<TokenTrace>, Vec<f64>, Vec<f64>) {
        let traces: Vec<TokenTrace> = patches
            .iter()
            .zip(&self.positions)
            .map(|(patch, pos)| self.backbone.encode(p, patch, pos))
            .collect();
        let mut pooled = vec![0.0; self.backbone.embed_dim()];
        for t in &traces {
            for (a, &b) in pooled.iter_mut().zip(&t.output) {
                *a += b;
            }
        }
        let n = traces.len() as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
        let logits = self.head.forward(p, &pooled);
        (traces, pooled, logits)
    }

    pub(crate) fn logits(&self, p: &[f64], patches: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        self.check_patches(patches)?;
        Ok(self.run(p, patches).2)
    }

    /// Adds `scale · ∂CE/∂θ` for one example into `grad`; returns the loss.
    pub(crate) fn accumulate(
        &self,
        p: &[f64],
        patches: &[Vec<f64>],
        label: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        self.check_patches(patches)?;
        if label >= self.num_classes() {
            return Err(ModelError::Shape(format!(
                "label {label} out of range for {} classes",
                self.num_classes()
            )));
        }
        let (traces, pooled, logits) = self.run(p, patches);
        let (loss, mut g_logits) = softmax_cross_entropy(&logits, label);
        g_logits.iter_mut().for_each(|g| *g *= scale);
        let g_pooled = self.head.backward(p, &pooled, &g_logits, grad);
        let n = traces.len() as f64;
        let g_token: Vec<f64> = g_pooled.iter().map(|g| g / n).collect();
        for (trace, patch) in traces.iter().zip(patches) {
            self.backbone.backward(p, patch, trace, &g_token, grad);
        }
        Ok(loss)
    }
}

/// Returns `(−log softmax(logits)[label], softmax(logits) − onehot(label))`.
pub(crate) fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    g[label] -= 1.0;
    (loss, g)
}

/// Index of the largest logit; ties go to the lowest index.
pub(crate) fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_start_with_sin0_cos0() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe[0], vec![0.0, 1.0, 0.0, 1.0]);
        assert!((pe[1][0] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[1][2] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, g) = softmax_cross_entropy(&[0.0; 4], 2);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![0.25, 0.25, -0.75, 0.25]);
    }
}
