//! Minimal differentiable building blocks shared by the encoder, the context
//! memory, the decoder and the transfer heads.

pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{log_softmax_rows, masked_softmax, Graph, Mask, Mat, Var};
pub use layers::{
    causal_mask, encode_stack, sinusoidal_encoding, Attended, EncoderLayer, FeedForward, Fwd,
    GatedAttentionPool, LayerNorm, Linear, MultiHeadAttention, Pooled,
};
pub use params::{quantize_f32, Adam, AdamConfig, Gradients, Init, ParamId, ParamStore};
