//! Reconstruction network: backbone encoder over visible tokens, decoder over
//! the full token sequence.
//!
//! Decoder input at position `t` is `s_t = (encoded_t or mask_token) + pe_t`.
//! Tokens exchange information through one uniform mixing step over the
//! visible tokens, `u_t = s_t + W_mix · mean_{v visible}(s_v)`, after which a
//! per-token tanh MLP emits `patch_size²` pixels for each masked position.

use std::ops::Range;

use crate::model::nn::{sinusoidal_positions, Backbone, Dense, TanhMlp, TokenTrace};
use crate::model::{LayoutEntry, ModelArchitecture, ModelError, TensorLayout};

use super::MaskPlan;

pub const DECODER_MIX_W: &str = "decoder.mix.weight";
pub const DECODER_FC1_W: &str = "decoder.fc1.weight";
pub const DECODER_FC1_B: &str = "decoder.fc1.bias";
pub const DECODER_FC2_W: &str = "decoder.fc2.weight";
pub const DECODER_FC2_B: &str = "decoder.fc2.bias";
pub const MASK_TOKEN: &str = "mask_token";

/// Backbone layout followed by the decoder and mask-token entries.
pub fn mim_layout(arch: &ModelArchitecture, decoder_hidden: usize) -> Result<TensorLayout, ModelError> {
    if decoder_hidden == 0 {
        return Err(ModelError::InvalidArchitecture("decoder_hidden must be positive".into()));
    }
    let (d, p) = (arch.embed_dim, arch.patch_len());
    let decoder = TensorLayout::new(vec![
        LayoutEntry::new(DECODER_MIX_W, vec![d, d]),
        LayoutEntry::new(DECODER_FC1_W, vec![decoder_hidden, d]),
        LayoutEntry::new(DECODER_FC1_B, vec![decoder_hidden]),
        LayoutEntry::new(DECODER_FC2_W, vec![p, decoder_hidden]),
        LayoutEntry::new(DECODER_FC2_B, vec![p]),
        LayoutEntry::new(MASK_TOKEN, vec![d]),
    ])?;
    arch.backbone_only().backbone_layout().concat(&decoder)
}

struct DecodedToken {
    position: usize,
    input: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

struct Trace {
    encoded: Vec<Option<TokenTrace>>,
    context: Vec<f64>,
    decoded: Vec<DecodedToken>,
}

pub(crate) struct MimNet {
    backbone: Backbone,
    mix: Dense,
    decoder: TanhMlp,
    mask_token: Range<usize>,
    positions: Vec<Vec<f64>>,
}

impl MimNet {
    pub(crate) fn bind(layout: &TensorLayout, num_patches: usize) -> Result<Self, ModelError> {
        let backbone = Backbone::bind(layout)?;
        let d = backbone.embed_dim();
        let mix = Dense::bind(layout, DECODER_MIX_W, None)?;
        let decoder = TanhMlp::bind(layout, (DECODER_FC1_W, DECODER_FC1_B), (DECODER_FC2_W, DECODER_FC2_B))?;
        let mask_token = layout
            .range(MASK_TOKEN)
            .ok_or_else(|| ModelError::Layout(format!("missing entry `{MASK_TOKEN}`")))?;
        if mix.inp != d || mix.out != d || decoder.input_dim() != d || mask_token.len() != d {
            return Err(ModelError::Layout("decoder widths disagree with embedding".into()));
        }
        if decoder.output_dim() != backbone.patch_len() {
            return Err(ModelError::Layout("decoder output is not one patch".into()));
        }
        Ok(Self { backbone, mix, decoder, mask_token, positions: sinusoidal_positions(num_patches, d) })
    }

    fn check(&self, patches: &[Vec<f64>], plan: &MaskPlan) -> Result<(), ModelError> {
        let n = self.positions.len();
        if patches.len() != n || plan.num_patches() != n {
            return Err(ModelError::Shape(format!(
                "expected {n} patches, got {} (plan covers {})",
                patches.len(),
                plan.num_patches()
            )));
        }
        if patches.iter().any(|p| p.len() != self.backbone.patch_len()) {
            return Err(ModelError::Shape("patch length does not match the embedding".into()));
        }
        Ok(())
    }

    fn run(&self, p: &[f64], patches: &[Vec<f64>], plan: &MaskPlan, visible_order: &[usize]) -> Trace {
        let n = self.positions.len();
        let mut encoded: Vec<Option<TokenTrace>> = (0..n).map(|_| None).collect();
        for &v in visible_order {
            encoded[v] = Some(self.backbone.encode(p, &patches[v], &self.positions[v]));
        }
        let mask = &p[self.mask_token.clone()];
        let sequence: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                let base = encoded[t].as_ref().map_or(mask, |tr| tr.output.as_slice());
                base.iter().zip(&self.positions[t]).map(|(a, b)| a + b).collect()
            })
            .collect();
        let d = self.backbone.embed_dim();
        let mut context = vec![0.0; d];
        for &v in plan.visible() {
            for (c, x) in context.iter_mut().zip(&sequence[v]) {
                *c += x;
            }
        }
        let nv = plan.visible().len().max(1) as f64;
        context.iter_mut().for_each(|c| *c /= nv);
        let mixed = self.mix.forward(p, &context);
        let decoded = plan
            .masked()
            .iter()
            .map(|&t| {
                let input: Vec<f64> = sequence[t].iter().zip(&mixed).map(|(a, b)| a + b).collect();
                let (hidden, output) = self.decoder.forward(p, &input);
                DecodedToken { position: t, input, hidden, output }
            })
            .collect();
        Trace { encoded, context, decoded }
    }

    pub(crate) fn predict_ordered(
        &self,
        p: &[f64],
        patches: &[Vec<f64>],
        plan: &MaskPlan,
        visible_order: &[usize],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check(patches, plan)?;
        Ok(self.run(p, patches, plan, visible_order).decoded.into_iter().map(|d| d.output).collect())
    }

    /// Adds `scale · ∂loss/∂θ` into `grad` and returns the loss, where the
    /// encoder reads `inputs` and the loss compares against `targets`.
    pub(crate) fn accumulate(
        &self,
        p: &[f64],
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        plan: &MaskPlan,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        self.check(inputs, plan)?;
        self.check(targets, plan)?;
        if plan.masked().is_empty() {
            return Ok(0.0);
        }
        let trace = self.run(p, inputs, plan, plan.visible());
        let n = self.positions.len();
        let d = self.backbone.embed_dim();
        let denom = (plan.masked().len() * self.backbone.patch_len()) as f64;

        let mut loss = 0.0;
        let mut g_sequence = vec![vec![0.0; d]; n];
        let mut g_mixed = vec![0.0; d];
        for tok in &trace.decoded {
            let target = &targets[tok.position];
            let g_out: Vec<f64> = tok
                .output
                .iter()
                .zip(target)
                .map(|(o, t)| {
                    loss += (o - t) * (o - t);
                    scale * 2.0 * (o - t) / denom
                })
                .collect();
            let g_in = self.decoder.backward(p, &tok.input, &tok.hidden, &g_out, grad);
            for k in 0..d {
                g_sequence[tok.position][k] += g_in[k];
                g_mixed[k] += g_in[k];
            }
        }
        let g_context = self.mix.backward(p, &trace.context, &g_mixed, grad);
        let nv = plan.visible().len() as f64;
        for &v in plan.visible() {
            for (a, c) in g_sequence[v].iter_mut().zip(&g_context) {
                *a += c / nv;
            }
        }
        for (t, g) in g_sequence.iter().enumerate() {
            match &trace.encoded[t] {
                Some(tr) => self.backbone.backward(p, &inputs[t], tr, g, grad),
                None => {
                    for (dst, v) in grad[self.mask_token.clone()].iter_mut().zip(g) {
                        *dst += v;
                    }
                }
            }
        }
        Ok(loss / denom)
    }
}
