use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mask, Mat, Var};
use super::params::{Init, ParamId, ParamStore};

/// Forward-pass context: the tape, the parameters it reads, and the dropout
/// state when running in training mode.
pub struct Fwd<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Fwd<'a> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            dropout: None,
        }
    }

    /// Training mode with inverted dropout at rate `p`, seeded.
    pub fn train(store: &'a ParamStore, p: f64, seed: u64) -> Self {
        Self {
            g: Graph::new(),
            store,
            dropout: Some((p, ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    /// Changes the dropout rate for the nodes recorded from now on, keeping
    /// the random stream. No effect in evaluation mode.
    pub fn set_dropout_rate(&mut self, p: f64) {
        if let Some((rate, _)) = self.dropout.as_mut() {
            *rate = p;
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut().filter(|(p, _)| *p > 0.0) else {
            return x;
        };
        let keep = 1.0 - *p;
        let shape = self.g.shape(x);
        let mask = Mat::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.g.input(mask);
        self.g.mul(x, m)
    }
}

/// Fixed sinusoidal encoding, one row per position.
pub fn sinusoidal_encoding(positions: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((positions, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Lower-triangular mask: row `i` may attend to columns `0..=i`.
pub fn causal_mask(n: usize) -> Mask {
    Mask::from_shape_fn((n, n), |(r, c)| c <= r)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_init(store, name, d_in, d_out, Init::Xavier)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Self {
        Self {
            weight: store.add(&format!("{name}.weight"), d_in, d_out, init),
            bias: store.add(&format!("{name}.bias"), 1, d_out, Init::Zeros),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.p(self.weight);
        let b = f.p(self.bias);
        let h = f.g.matmul(x, w);
        f.g.add_row(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), 1, dim, Init::Ones),
            beta: store.add(&format!("{name}.beta"), 1, dim, Init::Zeros),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let g = f.p(self.gamma);
        let b = f.p(self.beta);
        f.g.layer_norm(x, g, b, Self::EPS)
    }
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

/// Output of an attention call, with one probability matrix per head
/// (`queries × keys`).
pub struct Attended {
    pub output: Var,
    pub probs: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && d_model % heads == 0,
            "d_model must be divisible by heads"
        );
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model),
            heads,
            d_model,
        }
    }

    pub fn forward(&self, f: &mut Fwd, query: Var, kv: Var, mask: Option<&Mask>) -> Attended {
        let q = self.q.forward(f, query);
        let k = self.k.forward(f, kv);
        let v = self.v.forward(f, kv);
        let (output, probs) = self.attend(f, q, k, v, mask);
        let output = self.out.forward(f, output);
        Attended { output, probs }
    }

    /// Per-head attention over already projected queries, keys and values;
    /// returns the concatenated head outputs before the output projection.
    pub fn attend(
        &self,
        f: &mut Fwd,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Mask>,
    ) -> (Var, Vec<Var>) {
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = f.g.slice_cols(q, a, b);
            let kh = f.g.slice_cols(k, a, b);
            let vh = f.g.slice_cols(v, a, b);
            let scores = f.g.matmul_t(qh, kh);
            let scores = f.g.scale(scores, scale);
            let p = f.g.softmax(scores, mask);
            outs.push(f.g.matmul(p, vh));
            probs.push(p);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            f.g.concat_cols(&outs)
        };
        (joined, probs)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let h = self.up.forward(f, x);
        let h = f.g.gelu(h);
        let h = f.dropout(h);
        self.down.forward(f, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, d_ff: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, mask: Option<&Mask>) -> Attended {
        let h = self.norm1.forward(f, x);
        let a = self.attn.forward(f, h, h, mask);
        let a_out = f.dropout(a.output);
        let x = f.g.add(x, a_out);
        let h = self.norm2.forward(f, x);
        let h = self.ff.forward(f, h);
        let h = f.dropout(h);
        Attended {
            output: f.g.add(x, h),
            probs: a.probs,
        }
    }
}

/// Stack of encoder layers; zero layers is the identity.
pub fn encode_stack(
    layers: &[EncoderLayer],
    f: &mut Fwd,
    mut x: Var,
    mask: Option<&Mask>,
) -> (Var, Vec<Vec<Var>>) {
    let mut probs = Vec::with_capacity(layers.len());
    for layer in layers {
        let a = layer.forward(f, x, mask);
        x = a.output;
        probs.push(a.probs);
    }
    (x, probs)
}

/// Gated attention pooling: weights are the masked softmax of
/// `w · (tanh(xV) ⊙ sigmoid(xU))`, output is the weighted sum of rows.
#[derive(Clone, Debug)]
pub struct GatedAttentionPool {
    pub value: Linear,
    pub gate: Linear,
    pub score: Linear,
}

pub struct Pooled {
    /// `1×d` pooled vector.
    pub output: Var,
    /// `1×n` weights over the input rows.
    pub weights: Var,
    /// `1×n` pre-softmax scores.
    pub logits: Var,
}

impl GatedAttentionPool {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, hidden: usize) -> Self {
        Self {
            value: Linear::new(store, &format!("{name}.value"), d_model, hidden),
            gate: Linear::new(store, &format!("{name}.gate"), d_model, hidden),
            score: Linear::new(store, &format!("{name}.score"), hidden, 1),
        }
    }

    /// `keep` marks the rows that may receive weight; `None` keeps all.
    pub fn forward(&self, f: &mut Fwd, x: Var, keep: Option<&[bool]>) -> Pooled {
        let a = self.value.forward(f, x);
        let a = f.g.tanh(a);
        let b = self.gate.forward(f, x);
        let b = f.g.sigmoid(b);
        let h = f.g.mul(a, b);
        let s = self.score.forward(f, h);
        let logits = f.g.transpose(s);
        let mask = keep.map(|k| Mask::from_shape_fn((1, k.len()), |(_, c)| k[c]));
        let weights = f.g.softmax(logits, mask.as_ref());
        let output = f.g.matmul(weights, x);
        Pooled {
            output,
            weights,
            logits,
        }
    }
}
