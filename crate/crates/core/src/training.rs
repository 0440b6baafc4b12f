use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PatchFeatureBag, ReportRecord};
use crate::error::{HistGenError, Result};
use crate::metrics::{corpus_scores, NlgScore, NLG_COLUMNS};
use crate::model::ReportModel;
use crate::nn::{log_softmax_rows, Adam, AdamConfig, Fwd, Gradients, Mat, ParamStore};
use crate::tokenizer::{tokenize, TokenSequence, Vocabulary, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    pub epoch_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Conventional L2 weight decay inside Adam.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epoch_decay: 0.8,
            decay_every: 1,
            epochs: 30,
            batch_size: 8,
            seed: 42,
            label_smoothing: 0.0,
            weight_decay: 0.0,
            grad_clip: 5.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(HistGenError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.epoch_decay > 0.0 && self.epoch_decay <= 1.0) {
            return fail("epoch_decay must lie in (0, 1]");
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return fail("decay_every, batch_size and eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay and grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.epoch_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One bag with its encoded report, ready for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub wsi_id: String,
    pub features: Mat,
    pub target: TokenSequence,
    pub reference: String,
}

impl Example {
    pub fn new(bag: &PatchFeatureBag, report: &ReportRecord, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        Ok(Self {
            wsi_id: bag.wsi_id.clone(),
            features: bag.features_f64(),
            target: vocab.encode(&report.text, max_len)?,
            reference: report.text.clone(),
        })
    }
}

pub fn make_examples(pairs: &[(PatchFeatureBag, ReportRecord)], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|(b, r)| Example::new(b, r, vocab, max_len))
        .collect()
}

/// Mean negative log-likelihood of `target` under teacher-forced `logits`.
/// Row `r` of `logits` predicts `target.ids[r + 1]`; `PAD` targets are
/// skipped.
pub fn cross_entropy_loss(logits: &Mat, target: &TokenSequence) -> Result<f64> {
    let ids = &target.ids;
    if ids.len() < 2 || logits.nrows() + 1 > ids.len() {
        return Err(HistGenError::shape(format!(
            "{} logit rows for a target of length {}",
            logits.nrows(),
            ids.len()
        )));
    }
    let logp = log_softmax_rows(logits.view());
    let mut total = 0.0;
    let mut count = 0;
    for (r, &t) in ids[1..=logits.nrows()].iter().enumerate() {
        if t == PAD {
            continue;
        }
        if t >= logits.ncols() {
            return Err(HistGenError::invalid(format!("target id {t} outside logits")));
        }
        total -= logp[[r, t]];
        count += 1;
    }
    if count == 0 {
        return Err(HistGenError::invalid("every target position is padding"));
    }
    Ok(total / count as f64)
}

/// Loss and parameter gradients for a single example.
pub fn example_gradients(
    model: &ReportModel,
    example: &Example,
    smoothing: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<(crate::nn::ParamId, Mat)>)> {
    let mut f = match dropout_seed {
        Some(seed) => Fwd::train(&model.store, model.config.decoder.dropout, seed),
        None => Fwd::eval(&model.store),
    };
    let (logits, targets) = model.forward(&mut f, &example.features, &example.target)?;
    let targets: Vec<Option<usize>> = targets.into_iter().map(|t| (t != PAD).then_some(t)).collect();
    let loss = f.g.cross_entropy_smoothed(logits, &targets, smoothing);
    let value = f.g.value(loss)[[0, 0]];
    f.g.backward(loss);
    Ok((value, f.g.param_grads()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub val: Option<NlgScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generation {
    pub wsi_id: String,
    pub generated: String,
    pub reference: String,
    pub log_prob: f64,
}

/// Beam-search reports for `examples` and their NLG scores against the
/// references. Examples are decoded in parallel; results keep input order.
pub fn evaluate(model: &ReportModel, vocab: &Vocabulary, examples: &[Example], beam_size: usize) -> Result<(NlgScore, Vec<Generation>)> {
    let generations: Vec<Generation> = examples
        .par_iter()
        .map(|ex| {
            let out = model.generate(&ex.features, beam_size)?;
            Ok(Generation {
                wsi_id: ex.wsi_id.clone(),
                generated: vocab.decode(&out.token_ids)?,
                reference: ex.reference.clone(),
                log_prob: out.log_prob,
            })
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(Vec<String>, Vec<String>)> = generations
        .iter()
        .map(|g| (tokenize(&g.generated), tokenize(&g.reference)))
        .collect();
    Ok((corpus_scores(&pairs), generations))
}

pub struct FitOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters the model holds on return.
    pub best_epoch: usize,
    /// Validation BLEU-4 of that epoch; `None` without a validation set.
    pub best_bleu4: Option<f64>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

/// Trains `model` in place. Batches are formed from a per-epoch seeded
/// shuffle; per-example gradients are computed in parallel and summed in
/// batch order, so results do not depend on the thread count. With a
/// validation set the model ends on the parameters of the epoch with the
/// best validation BLEU-4 (earliest on ties), otherwise on the last epoch.
pub fn fit(
    model: &mut ReportModel,
    vocab: &Vocabulary,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(HistGenError::invalid("training split is empty"));
    }
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let beam = model.config.decoder.beam_size;

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let seed = mix(config.seed, epoch as u64, 1 + i as u64);
                    example_gradients(model, &train[i], config.label_smoothing, Some(seed))
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::new(&model.store);
            let mut batch_loss = 0.0;
            for (loss, g) in results {
                batch_loss += loss;
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(HistGenError::Divergence {
                    epoch: epoch + 1,
                    step,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            if config.grad_clip > 0.0 {
                grads.clip_global_norm(config.grad_clip);
            }
            adam.step(&mut model.store, &grads, lr, |_| true);
            loss_sum += batch_loss;
        }
        let loss = loss_sum / train.len() as f64;
        let last = epoch + 1 == config.epochs;
        let val_score = if !val.is_empty() && ((epoch + 1) % config.eval_every == 0 || last) {
            Some(evaluate(model, vocab, val, beam)?.0)
        } else {
            None
        };
        if let Some(s) = &val_score {
            if best.as_ref().is_none_or(|b| s.bleu[3] > b.0) {
                best = Some((s.bleu[3], epoch + 1, model.store.clone()));
            }
        }
        log::info!("epoch {} lr {lr:.3e} loss {loss:.5}", epoch + 1);
        log.push(EpochLog {
            epoch: epoch + 1,
            learning_rate: lr,
            loss,
            val: val_score,
        });
    }
    Ok(match best {
        Some((bleu4, epoch, store)) => {
            model.store = store;
            FitOutcome {
                log,
                best_epoch: epoch,
                best_bleu4: Some(bleu4),
            }
        }
        None => FitOutcome {
            log,
            best_epoch: config.epochs,
            best_bleu4: None,
        },
    })
}

/// Writes the per-epoch log as CSV: epoch, learning rate, loss and the six
/// validation metrics (empty when that epoch was not validated).
pub fn write_metric_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch", "lr", "loss"];
    header.extend(NLG_COLUMNS);
    w.write_record(&header)?;
    for e in log {
        let mut row = vec![e.epoch.to_string(), format!("{:e}", e.learning_rate), format!("{:.6}", e.loss)];
        match &e.val {
            Some(s) => row.extend(s.as_row().iter().map(|v| format!("{v:.6}"))),
            None => row.extend(std::iter::repeat_n(String::new(), 6)),
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| HistGenError::invalid(e.to_string()))?;
    let mut file = std::fs::File::create(path).map_err(|e| HistGenError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| HistGenError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Mat::zeros((3, 8));
        let t = TokenSequence::new(vec![1, 4, 5, 2]);
        let l = cross_entropy_loss(&logits, &t).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn padding_is_excluded() {
        let mut logits = Mat::zeros((4, 6));
        logits[[3, 0]] = 50.0;
        let t = TokenSequence::new(vec![1, 4, 2, 0, 0]);
        let l = cross_entropy_loss(&logits, &t).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        let all_pad = TokenSequence::new(vec![1, 0, 0]);
        assert!(cross_entropy_loss(&Mat::zeros((2, 6)), &all_pad).is_err());
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let t = TokenSequence::new(vec![1, 3, 2]);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut logits = Mat::zeros((2, 5));
            logits[[0, 3]] = margin;
            logits[[1, 2]] = margin;
            let l = cross_entropy_loss(&logits, &t).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        for k in 0..5 {
            let want = 1e-4 * 0.8f64.powi(k as i32);
            assert!((c.learning_rate_at(k) - want).abs() < 1e-18);
        }
        let c = TrainConfig { decay_every: 10, ..c };
        assert_eq!(c.learning_rate_at(9), 1e-4);
        assert!((c.learning_rate_at(10) - 8e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epoch_decay: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epoch_decay: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
    }
}
