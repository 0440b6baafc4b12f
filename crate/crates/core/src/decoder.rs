use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cmc::CmcModule;
use crate::error::{HistGenError, Result};
use crate::nn::{
    causal_mask, log_softmax_rows, sinusoidal_encoding, FeedForward, Fwd, Init, LayerNorm, Linear,
    Mat, MultiHeadAttention, ParamId, ParamStore, Var,
};
use crate::tokenizer::{TokenSequence, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    /// Filled from the vocabulary when a model is built for a corpus.
    pub vocab_size: usize,
    /// Sequence budget including `BOS` and `EOS`.
    pub max_len: usize,
    pub beam_size: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            d_model: 512,
            ff_dim: 2048,
            vocab_size: 0,
            max_len: 100,
            beam_size: 3,
            dropout: 0.1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(HistGenError::Config("decoder needs at least one layer".into()));
        }
        if self.beam_size < 1 {
            return Err(HistGenError::Config("beam_size must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(HistGenError::Config(format!(
                "decoder d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(HistGenError::Config(format!(
                "vocab_size {} leaves no room for tokens beyond the specials",
                self.vocab_size
            )));
        }
        if self.max_len < 3 {
            return Err(HistGenError::Config("decoder max_len must be >= 3".into()));
        }
        Ok(())
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention over the
/// region representations, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, c: &DecoderConfig) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c.d_model),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), c.d_model, c.heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c.d_model),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), c.d_model, c.heads),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c.d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), c.d_model, c.ff_dim),
        }
    }
}

pub struct DecoderOutput {
    /// `t×vocab_size`
    pub logits: Var,
    /// Per layer, per head `t×N` cross-attention weights.
    pub cross_attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationOutput {
    /// `BOS … EOS`, or `BOS …` when the length budget ran out.
    pub token_ids: TokenSequence,
    /// Sum of the generated tokens' log-probabilities.
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub ids: Vec<usize>,
    pub score: f64,
    pub finished: bool,
    /// Step at which `EOS` was emitted.
    pub finished_at: Option<usize>,
}

/// Order for picking the best of a set: higher score first, then the
/// lexicographically smaller id sequence, then the earlier finish.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.ids.cmp(&b.ids))
        .then_with(|| a.finished_at.cmp(&b.finished_at))
}

#[derive(Clone, Debug)]
pub struct ReportDecoder {
    pub config: DecoderConfig,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub output: Linear,
}

impl ReportDecoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            embed: store.add(
                &format!("{name}.embed"),
                config.vocab_size,
                d,
                Init::Normal(1.0 / (d as f64).sqrt()),
            ),
            layers: (0..config.layers)
                .map(|i| DecoderLayer::new(store, &format!("{name}.layers.{i}"), config))
                .collect(),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
            output: Linear::with_init(store, &format!("{name}.output"), d, config.vocab_size, Init::Normal(0.02)),
            config: config.clone(),
        })
    }

    /// Scaled token embeddings plus sinusoidal positions.
    pub fn embed_tokens(&self, f: &mut Fwd, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(HistGenError::invalid(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let d = self.config.d_model;
        let table = f.p(self.embed);
        let e = f.g.gather_rows(table, tokens);
        let e = f.g.scale(e, (d as f64).sqrt());
        let pe = f.g.input(sinusoidal_encoding(tokens.len(), d));
        let e = f.g.add(e, pe);
        Ok(f.dropout(e))
    }

    /// Logits for every position of `tokens` (row `i` predicts token `i+1`),
    /// conditioned on `visual` (`N×d_model`) and on `tokens[..=i]` only.
    pub fn forward(&self, f: &mut Fwd, visual: Var, tokens: &[usize], cmc: Option<&CmcModule>) -> Result<DecoderOutput> {
        if tokens.is_empty() {
            return Err(HistGenError::invalid("decoder input is empty"));
        }
        let mut x = self.embed_tokens(f, tokens)?;
        if let Some(cmc) = cmc {
            x = cmc.textual_pass(f, x)?;
        }
        let mask = causal_mask(tokens.len());
        let mut cross_attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.norm1.forward(f, x);
            let a = layer.self_attn.forward(f, h, h, Some(&mask));
            let a = f.dropout(a.output);
            x = f.g.add(x, a);
            let h = layer.norm2.forward(f, x);
            let c = layer.cross_attn.forward(f, h, visual, None);
            cross_attention.push(c.probs);
            let c = f.dropout(c.output);
            x = f.g.add(x, c);
            let h = layer.norm3.forward(f, x);
            let h = layer.ff.forward(f, h);
            let h = f.dropout(h);
            x = f.g.add(x, h);
        }
        let x = self.final_norm.forward(f, x);
        Ok(DecoderOutput {
            logits: self.output.forward(f, x),
            cross_attention,
        })
    }

    /// Teacher-forced logits for a `BOS`-initial target: the input is the
    /// target without its last token, so the result has one row per
    /// predicted token. Padding is stripped first.
    pub fn teacher_forcing(&self, f: &mut Fwd, visual: Var, target: &TokenSequence, cmc: Option<&CmcModule>) -> Result<(Var, Vec<usize>)> {
        let ids = target.unpadded();
        if ids.first() != Some(&BOS) {
            return Err(HistGenError::invalid("target must begin with BOS"));
        }
        if ids.len() < 2 {
            return Err(HistGenError::invalid("target has no tokens to predict"));
        }
        if ids.len() > self.config.max_len {
            return Err(HistGenError::invalid(format!(
                "target length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        let out = self.forward(f, visual, &ids[..ids.len() - 1], cmc)?;
        Ok((out.logits, ids[1..].to_vec()))
    }
}

/// Inference over a fixed visual context. Everything here runs in
/// evaluation mode and is a pure function of the parameters.
pub struct Generator<'a> {
    pub decoder: &'a ReportDecoder,
    pub cmc: Option<&'a CmcModule>,
    pub store: &'a ParamStore,
    /// `N×d_model` decoder memory (region representations after any visual
    /// context pass).
    pub visual: &'a Mat,
}

impl Generator<'_> {
    /// Log-probabilities of the next token after `prefix`.
    pub fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut f = Fwd::eval(self.store);
        let v = f.g.input(self.visual.clone());
        let out = self.decoder.forward(&mut f, v, prefix, self.cmc)?;
        let logits = f.g.value(out.logits);
        let last = logits.slice(ndarray::s![logits.nrows() - 1.., ..]);
        Ok(log_softmax_rows(last).row(0).to_vec())
    }

    /// Per-position log-probabilities of the observed tokens of `seq`
    /// (after `BOS`, padding excluded).
    pub fn token_log_probs(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let mut f = Fwd::eval(self.store);
        let v = f.g.input(self.visual.clone());
        let (logits, targets) = self.decoder.teacher_forcing(&mut f, v, seq, self.cmc)?;
        let logp = log_softmax_rows(f.g.value(logits).view());
        Ok(targets.iter().enumerate().map(|(r, &t)| logp[[r, t]]).collect())
    }

    /// `Σ log P(yᵢ | y<ᵢ, I)` over the tokens after `BOS`.
    pub fn log_prob_of_sequence(&self, seq: &TokenSequence) -> Result<f64> {
        Ok(self.token_log_probs(seq)?.iter().sum())
    }

    /// Argmax decoding of at most `max_new` tokens after `BOS`; ties go to
    /// the lower token id.
    pub fn greedy(&self, max_new: usize) -> Result<GenerationOutput> {
        let mut ids = vec![BOS];
        let mut log_prob = 0.0;
        for _ in 0..max_new {
            let lp = self.next_log_probs(&ids)?;
            let (tok, best) = lp
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            ids.push(tok);
            log_prob += best;
            if tok == EOS {
                break;
            }
        }
        Ok(GenerationOutput {
            token_ids: TokenSequence::new(ids),
            log_prob,
        })
    }

    /// Beam search over summed log-probabilities without length
    /// normalization. Each step keeps the `beam_size` best extensions over
    /// all live beams; extensions ending in `EOS` are set aside as finished.
    /// Returns the best finished hypothesis, or the best live one when none
    /// finished within `max_new` tokens.
    pub fn beam_search(&self, beam_size: usize, max_new: usize) -> Result<GenerationOutput> {
        if beam_size < 1 {
            return Err(HistGenError::invalid("beam_size must be >= 1"));
        }
        let mut live = vec![BeamHypothesis {
            ids: vec![BOS],
            score: 0.0,
            finished: false,
            finished_at: None,
        }];
        let mut finished: Vec<BeamHypothesis> = Vec::new();
        for step in 0..max_new {
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for (b, hyp) in live.iter().enumerate() {
                let lp = self.next_log_probs(&hyp.ids)?;
                candidates.extend(lp.iter().enumerate().map(|(tok, &l)| (hyp.score + l, b, tok)));
            }
            candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.2.cmp(&y.2)).then(x.1.cmp(&y.1)));
            let mut next = Vec::with_capacity(beam_size);
            for &(score, b, tok) in candidates.iter().take(beam_size) {
                let mut ids = live[b].ids.clone();
                ids.push(tok);
                let done = tok == EOS;
                let hyp = BeamHypothesis {
                    ids,
                    score,
                    finished: done,
                    finished_at: done.then_some(step),
                };
                if done {
                    finished.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
            // Scores only decrease, so no live beam can overtake a finished
            // hypothesis that already scores at least as high.
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if finished.iter().any(|h| h.score >= best_live) {
                break;
            }
        }
        let pool = if finished.is_empty() { &mut live } else { &mut finished };
        pool.sort_by(rank);
        let best = pool.swap_remove(0);
        Ok(GenerationOutput {
            token_ids: TokenSequence::new(best.ids),
            log_prob: best.score,
        })
    }
}
