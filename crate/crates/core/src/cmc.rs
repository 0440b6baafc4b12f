//! Cross-modal context memory.
//!
//! One learnable `m×d_model` memory serves both modalities. Visual sequences
//! are first compressed to `l` prototype vectors by cross-attention from
//! learnable prototype queries; prototypes (or, on the text side, token
//! embeddings directly) query the memory, and the responses are fused back
//! into the querying sequence through a residual whose elementwise gate
//! starts at zero. A zero gate makes the module an exact identity.
//!
//! The memory is updated only by gradient descent during training; there is
//! no runtime write path.

use serde::{Deserialize, Serialize};

use crate::error::{HistGenError, Result};
use crate::nn::{Fwd, Init, Linear, MultiHeadAttention, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmcConfig {
    /// Number of memory slots `m`.
    pub memory_slots: usize,
    /// Number of prototype queries `l`.
    pub prototypes: usize,
    pub heads: usize,
}

impl Default for CmcConfig {
    fn default() -> Self {
        Self {
            memory_slots: 2048,
            prototypes: 64,
            heads: 8,
        }
    }
}

impl CmcConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.memory_slots == 0 || self.prototypes == 0 {
            return Err(HistGenError::Config(
                "memory_slots and prototypes must be positive".into(),
            ));
        }
        if self.heads == 0 || d_model % self.heads != 0 {
            return Err(HistGenError::Config(format!(
                "cmc heads {} do not divide d_model {d_model}",
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    Visual,
    Textual,
}

/// Residual fusion `x + gate ⊙ (r W + b)`.
#[derive(Clone, Debug)]
pub struct GatedResidual {
    pub proj: Linear,
    pub gate: ParamId,
}

impl GatedResidual {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), d, d),
            gate: store.add(&format!("{name}.gate"), 1, d, Init::Zeros),
        }
    }
}

/// Result of a visual pass.
pub struct VisualPass {
    pub output: Var,
    /// Per head, `l×n` prototype attention over the visual sequence.
    pub prototype_attention: Vec<Var>,
    /// Per head, `l×m` attention over memory slots.
    pub memory_attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct CmcModule {
    pub config: CmcConfig,
    pub memory: ParamId,
    pub prototypes: ParamId,
    pub prototype_attn: MultiHeadAttention,
    pub memory_attn: MultiHeadAttention,
    pub visual: GatedResidual,
    pub textual: GatedResidual,
}

impl CmcModule {
    pub fn new(store: &mut ParamStore, name: &str, config: &CmcConfig, d_model: usize) -> Result<Self> {
        config.validate(d_model)?;
        let std = 1.0 / (d_model as f64).sqrt();
        Ok(Self {
            memory: store.add(&format!("{name}.memory"), config.memory_slots, d_model, Init::Normal(std)),
            prototypes: store.add(&format!("{name}.prototypes"), config.prototypes, d_model, Init::Normal(std)),
            prototype_attn: MultiHeadAttention::new(store, &format!("{name}.prototype_attn"), d_model, config.heads),
            memory_attn: MultiHeadAttention::new(store, &format!("{name}.memory_attn"), d_model, config.heads),
            visual: GatedResidual::new(store, &format!("{name}.visual"), d_model),
            textual: GatedResidual::new(store, &format!("{name}.textual"), d_model),
            config: config.clone(),
        })
    }

    /// Cross-attention from the `l` prototype queries onto `visual`
    /// (`s×d_model`); returns `l×d_model` selected features and the per-head
    /// `l×s` attention.
    pub fn select_prototypes(&self, f: &mut Fwd, visual: Var) -> Result<(Var, Vec<Var>)> {
        if f.g.shape(visual).0 == 0 {
            return Err(HistGenError::invalid("prototype selection on an empty sequence"));
        }
        let queries = f.p(self.prototypes);
        let a = self.prototype_attn.forward(f, queries, visual, None);
        Ok((a.output, a.probs))
    }

    /// Scaled dot-product attention of `queries` (`q×d_model`) over the
    /// memory rows; returns `q×d_model` responses and per-head `q×m` weights.
    pub fn query_memory(&self, f: &mut Fwd, queries: Var) -> (Var, Vec<Var>) {
        let memory = f.p(self.memory);
        let a = self.memory_attn.forward(f, queries, memory, None);
        (a.output, a.probs)
    }

    /// Residual gated fusion of `responses` (already aligned row-for-row
    /// with `original`).
    pub fn aggregate_responses(&self, f: &mut Fwd, original: Var, responses: Var, pathway: Pathway) -> Result<Var> {
        if f.g.shape(original) != f.g.shape(responses) {
            return Err(HistGenError::shape(format!(
                "responses {:?} do not align with sequence {:?}",
                f.g.shape(responses),
                f.g.shape(original)
            )));
        }
        let fuse = match pathway {
            Pathway::Visual => &self.visual,
            Pathway::Textual => &self.textual,
        };
        let r = fuse.proj.forward(f, responses);
        let gate = f.p(fuse.gate);
        let gated = f.g.mul_row(r, gate);
        Ok(f.g.add(original, gated))
    }

    /// select prototypes → query memory → broadcast responses back over the
    /// sequence with the transposed head-averaged prototype attention →
    /// gated residual.
    pub fn visual_pass(&self, f: &mut Fwd, visual: Var) -> Result<VisualPass> {
        let (selected, proto_attn) = self.select_prototypes(f, visual)?;
        let (responses, memory_attention) = self.query_memory(f, selected);
        let mut avg = proto_attn[0];
        for &p in &proto_attn[1..] {
            avg = f.g.add(avg, p);
        }
        let avg = f.g.scale(avg, 1.0 / proto_attn.len() as f64);
        let back = f.g.transpose(avg);
        let back = f.g.matmul(back, responses);
        let output = self.aggregate_responses(f, visual, back, Pathway::Visual)?;
        Ok(VisualPass {
            output,
            prototype_attention: proto_attn,
            memory_attention,
        })
    }

    /// Positionwise memory query for `t×d_model` token embeddings.
    pub fn textual_pass(&self, f: &mut Fwd, tokens: Var) -> Result<Var> {
        if f.g.shape(tokens).0 == 0 {
            return Err(HistGenError::invalid("textual pass on an empty sequence"));
        }
        let (responses, _) = self.query_memory(f, tokens);
        self.aggregate_responses(f, tokens, responses, Pathway::Textual)
    }
}
