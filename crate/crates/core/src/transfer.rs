//! Slide-level heads on top of the hierarchical encoder.
//!
//! Region representations are pooled into one WSI vector by a gated
//! attention pool and mapped to class logits or to `B` discrete-time hazard
//! logits. For survival, `z_b` is the logit of the hazard `h_b = σ(z_b)` of
//! bin `b`; a record with event in bin `k` contributes
//! `-Σ_{j<k} log(1-h_j) - log h_k`, a censored one only the first sum.
//!
//! With `S_b = Π_{j≤b} (1-h_j)` two risk scores are available: the default
//! `Σ_b (1 - S_b)`, and `-Σ_b log S_b`. Both vanish as all hazards go to
//! zero and grow strictly with every hazard logit. The second is unbounded:
//! once the model is confident, its ordering across patients depends on how
//! far the saturated logits have drifted and on hazards of bins after the
//! event, which the likelihood never constrains.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_feature_bag, synth_generate, PatchFeatureBag, SyntheticSpec};
use crate::error::{HistGenError, Result};
use crate::lgh::{EncoderConfig, LghEncoder};
use crate::metrics::{binary_and_multiclass_scores, c_index, SurvivalRecord};
use crate::nn::{Adam, AdamConfig, Fwd, GatedAttentionPool, Gradients, Linear, Mat, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification { classes: usize },
    Survival { bins: usize },
}

impl TaskKind {
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Survival { bins } => bins,
        }
    }
}

/// Encoder, WSI pool and task head in one parameter store. Encoder
/// parameters are named `encoder.*`, so they line up with those of a
/// report-generation model.
#[derive(Clone, Debug)]
pub struct TransferModel {
    pub kind: TaskKind,
    pub store: ParamStore,
    pub encoder: LghEncoder,
    pub pool: GatedAttentionPool,
    pub head: Linear,
}

pub struct WsiPooled {
    /// `1×d_model`
    pub output: Var,
    /// `1×N` weights over regions.
    pub weights: Var,
}

impl TransferModel {
    pub fn new(encoder: &EncoderConfig, kind: TaskKind, seed: u64) -> Result<Self> {
        if kind.outputs() < 2 && matches!(kind, TaskKind::Classification { .. }) {
            return Err(HistGenError::Config("classification needs at least 2 classes".into()));
        }
        if kind.outputs() == 0 {
            return Err(HistGenError::Config("survival needs at least 1 bin".into()));
        }
        let mut store = ParamStore::new(seed);
        let enc = LghEncoder::new(&mut store, "encoder", encoder)?;
        let d = encoder.d_model;
        let pool = GatedAttentionPool::new(&mut store, "wsi_pool", d, d);
        let head = Linear::new(&mut store, "head", d, kind.outputs());
        Ok(Self {
            kind,
            store,
            encoder: enc,
            pool,
            head,
        })
    }

    /// Copies every `encoder.*` tensor of `source` with a matching name and
    /// shape; returns how many were copied.
    pub fn load_encoder_from(&mut self, source: &ParamStore) -> usize {
        let mut copied = 0;
        let names: Vec<String> = self
            .store
            .iter()
            .map(|(_, n, _)| n.to_string())
            .filter(|n| n.starts_with("encoder."))
            .collect();
        for name in names {
            if let Some(id) = source.id(&name) {
                if self.store.assign(&name, source.value(id).clone()).is_ok() {
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn pool_wsi(&self, f: &mut Fwd, regions: Var) -> WsiPooled {
        let p = self.pool.forward(f, regions, None);
        WsiPooled {
            output: p.output,
            weights: p.weights,
        }
    }

    /// `1×outputs` head logits for an `n×d_in` bag.
    pub fn logits(&self, f: &mut Fwd, features: &Mat) -> Result<Var> {
        let x = f.g.input(features.clone());
        let reps = self.encoder.forward(f, x)?.reps;
        let pooled = self.pool_wsi(f, reps);
        Ok(self.head.forward(f, pooled.output))
    }

    fn eval_logits(&self, features: &Mat) -> Result<Vec<f64>> {
        let mut f = Fwd::eval(&self.store);
        let z = self.logits(&mut f, features)?;
        Ok(f.g.value(z).row(0).to_vec())
    }

    /// Class probabilities.
    pub fn classify(&self, features: &Mat) -> Result<Vec<f64>> {
        let z = self.eval_logits(features)?;
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / s).collect())
    }

    /// Per-bin hazards and the risk score.
    pub fn survival(&self, features: &Mat, risk: RiskScore) -> Result<(Vec<f64>, f64)> {
        let z = self.eval_logits(features)?;
        let hazards = z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Ok((hazards, risk.from_logits(&z)))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskScore {
    /// `Σ_b (1 - S_b)`
    #[default]
    CumulativeIncidence,
    /// `-Σ_b log S_b`
    NegLogSurvival,
}

impl RiskScore {
    /// Risk from hazard logits; `log S_b = -Σ_{j≤b} softplus(z_j)`.
    pub fn from_logits(self, z: &[f64]) -> f64 {
        let mut log_s = 0.0;
        let mut risk = 0.0;
        for &v in z {
            log_s -= softplus(v);
            risk += match self {
                RiskScore::CumulativeIncidence => -f64::exp_m1(log_s),
                RiskScore::NegLogSurvival => -log_s,
            };
        }
        risk
    }
}

/// Interior quantile edges splitting `times` into `bins` groups, taken over
/// the distinct values so that heavily tied times still spread over the
/// bins.
pub fn quantile_edges(times: &[f64], bins: usize) -> Vec<f64> {
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    (1..bins)
        .map(|j| {
            let pos = j as f64 / bins as f64 * (t.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            t[lo] + (t[hi] - t[lo]) * (pos - lo as f64)
        })
        .collect()
}

/// Bin `j` covers `[edges[j-1], edges[j])`.
pub fn time_bin(edges: &[f64], time: f64) -> usize {
    edges.partition_point(|&e| e <= time)
}

/// Censored discrete-time negative log-likelihood of a `1×B` logit row.
pub fn survival_nll(f: &mut Fwd, logits: Var, bin: usize, censored: bool) -> Var {
    let b = f.g.shape(logits).1;
    let event = if censored { 0.0 } else { 1.0 };
    let a = Mat::from_shape_fn((1, b), |(_, j)| if j < bin { 1.0 } else if j == bin { event } else { 0.0 });
    let c = Mat::from_shape_fn((1, b), |(_, j)| if j == bin { event } else { 0.0 });
    let a = f.g.input(a);
    let c = f.g.input(c);
    let sp = f.g.softplus(logits);
    let pos = f.g.mul(sp, a);
    let neg = f.g.mul(logits, c);
    let neg = f.g.scale(neg, -1.0);
    let s = f.g.add(pos, neg);
    f.g.sum(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskTarget {
    Class(usize),
    Survival { time: f64, censored: bool },
}

#[derive(Clone, Debug)]
pub struct TaskExample {
    pub wsi_id: String,
    pub features: Mat,
    pub target: TaskTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub wsi_id: String,
    pub feature_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub censored: Option<bool>,
}

/// Labelled slides for a downstream task: a class id per entry, or an event
/// time with its censoring flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub d_in: usize,
    pub entries: Vec<TaskEntry>,
}

impl TaskManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HistGenError::io(path, e))?;
        let mut m: TaskManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.feature_file.is_relative() {
                e.feature_file = base.join(&e.feature_file);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn load_examples(&self, kind: TaskKind) -> Result<Vec<TaskExample>> {
        self.entries
            .iter()
            .map(|e| {
                let target = match kind {
                    TaskKind::Classification { classes } => match e.class {
                        Some(c) if c < classes => TaskTarget::Class(c),
                        Some(c) => {
                            return Err(HistGenError::invalid(format!(
                                "{}: class {c} outside {classes} classes",
                                e.wsi_id
                            )))
                        }
                        None => return Err(HistGenError::invalid(format!("{}: missing class", e.wsi_id))),
                    },
                    TaskKind::Survival { .. } => match e.time {
                        Some(t) if t > 0.0 && t.is_finite() => TaskTarget::Survival {
                            time: t,
                            censored: e.censored.unwrap_or(false),
                        },
                        Some(t) => {
                            return Err(HistGenError::invalid(format!(
                                "{}: survival time {t} must be positive",
                                e.wsi_id
                            )))
                        }
                        None => return Err(HistGenError::invalid(format!("{}: missing time", e.wsi_id))),
                    },
                };
                let bag = load_feature_bag(&e.feature_file)?;
                if bag.d_in() != self.d_in {
                    return Err(HistGenError::invalid(format!(
                        "{}: feature dimension {} differs from manifest d_in {}",
                        e.wsi_id,
                        bag.d_in(),
                        self.d_in
                    )));
                }
                Ok(TaskExample {
                    wsi_id: e.wsi_id.clone(),
                    features: bag.features_f64(),
                    target,
                })
            })
            .collect()
    }
}

/// Bags with one planted theme each, labelled by that theme (`classes`
/// themes, pure patches when `noise_scale` is 0).
pub fn synth_classification(
    num_wsis: usize,
    classes: usize,
    d_in: usize,
    n_range: (usize, usize),
    noise_scale: f64,
    seed: u64,
) -> Result<(Vec<PatchFeatureBag>, Vec<usize>)> {
    let mut spec = SyntheticSpec::planted(num_wsis, classes, d_in, n_range, noise_scale, seed);
    spec.max_themes_per_wsi = 1;
    let corpus = synth_generate(&spec)?;
    let labels = corpus.truth.iter().map(|t| t.themes[0]).collect();
    Ok((corpus.bags, labels))
}

/// Bags whose primary theme (of four) fixes the event-time quartile; times
/// are `12·(4 - q)` for primary theme `q`, so theme 0 is the shortest-lived.
/// A `censor_rate` fraction of records is marked censored at that time.
pub fn synth_survival(
    num_wsis: usize,
    d_in: usize,
    n_range: (usize, usize),
    noise_scale: f64,
    censor_rate: f64,
    seed: u64,
) -> Result<(Vec<PatchFeatureBag>, Vec<(f64, bool)>)> {
    let mut spec = SyntheticSpec::planted(num_wsis, 4, d_in, n_range, noise_scale, seed);
    spec.max_themes_per_wsi = 2;
    let corpus = synth_generate(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5355_5256);
    let labels = corpus
        .truth
        .iter()
        .map(|t| {
            let q = t.themes[0];
            let censored = rand::Rng::random::<f64>(&mut rng) < censor_rate;
            (12.0 * (4 - q) as f64, censored)
        })
        .collect();
    Ok((corpus.bags, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub freeze_encoder: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub monte_carlo_folds: usize,
    /// Fraction of slides used for training in each fold.
    pub train_fraction: f64,
    pub survival_bins: usize,
    pub risk: RiskScore,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            freeze_encoder: false,
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 8,
            monte_carlo_folds: 5,
            train_fraction: 0.7,
            survival_bins: 4,
            risk: RiskScore::default(),
            grad_clip: 5.0,
            seed: 42,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.monte_carlo_folds == 0 {
            return Err(HistGenError::Config("monte_carlo_folds must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.survival_bins == 0 {
            return Err(HistGenError::Config(
                "learning_rate, batch_size and survival_bins must be positive".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(HistGenError::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn example_loss(model: &TransferModel, f: &mut Fwd, ex: &TaskExample, edges: &[f64]) -> Result<Var> {
    let z = model.logits(f, &ex.features)?;
    Ok(match ex.target {
        TaskTarget::Class(c) => f.g.cross_entropy(z, &[Some(c)]),
        TaskTarget::Survival { time, censored } => survival_nll(f, z, time_bin(edges, time), censored),
    })
}

/// Fits the head (and the encoder unless frozen) on `train`; returns the
/// mean loss of the last epoch.
pub fn train_transfer(model: &mut TransferModel, train: &[TaskExample], config: &FinetuneConfig, seed: u64) -> Result<f64> {
    let edges = match model.kind {
        TaskKind::Survival { bins } => {
            let times: Vec<f64> = train
                .iter()
                .filter_map(|e| match e.target {
                    TaskTarget::Survival { time, .. } => Some(time),
                    TaskTarget::Class(_) => None,
                })
                .collect();
            quantile_edges(&times, bins)
        }
        TaskKind::Classification { .. } => Vec::new(),
    };
    let mut adam = Adam::new(&model.store, AdamConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freeze = config.freeze_encoder;
    let mut last = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<(f64, _)> = batch
                .par_iter()
                .map(|&i| {
                    let mut f = Fwd::eval(&model.store);
                    let loss = example_loss(model, &mut f, &train[i], &edges)?;
                    let v = f.g.value(loss)[[0, 0]];
                    f.g.backward(loss);
                    Ok((v, f.g.param_grads()))
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::new(&model.store);
            let mut batch_loss = 0.0;
            for (l, g) in results {
                batch_loss += l;
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(HistGenError::Divergence {
                    epoch: epoch + 1,
                    step,
                    loss: batch_loss,
                });
            }
            if config.grad_clip > 0.0 {
                grads.clip_global_norm(config.grad_clip);
            }
            adam.step(&mut model.store, &grads, config.learning_rate, |name| {
                !(freeze && name.starts_with("encoder."))
            });
            total += batch_loss;
        }
        last = total / train.len() as f64;
    }
    Ok(last)
}

/// Metric name → value for one evaluation.
pub type FoldMetrics = BTreeMap<String, f64>;

pub fn evaluate_transfer(model: &TransferModel, test: &[TaskExample], risk: RiskScore) -> Result<FoldMetrics> {
    let mut out = FoldMetrics::new();
    match model.kind {
        TaskKind::Classification { .. } => {
            let probs: Vec<Vec<f64>> = test
                .par_iter()
                .map(|e| model.classify(&e.features))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = test
                .iter()
                .map(|e| match e.target {
                    TaskTarget::Class(c) => c,
                    TaskTarget::Survival { .. } => unreachable!("classification task holds class targets"),
                })
                .collect();
            let s = binary_and_multiclass_scores(&probs, &labels)?;
            out.insert("Accuracy".into(), s.accuracy);
            out.insert("AUC".into(), s.auc);
        }
        TaskKind::Survival { .. } => {
            let records: Vec<SurvivalRecord> = test
                .par_iter()
                .map(|e| {
                    let (_, risk) = model.survival(&e.features, risk)?;
                    let TaskTarget::Survival { time, censored } = e.target else {
                        unreachable!("survival task holds survival targets")
                    };
                    Ok(SurvivalRecord {
                        risk_score: risk,
                        event_time: time,
                        censored,
                    })
                })
                .collect::<Result<_>>()?;
            out.insert("c-index".into(), c_index(&records)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: FoldMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub method: String,
    pub folds: Vec<FoldResult>,
    pub skipped: Vec<usize>,
}

impl FinetuneReport {
    /// Mean and sample standard deviation per metric over completed folds.
    pub fn summary(&self) -> BTreeMap<String, (f64, f64)> {
        let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for f in &self.folds {
            for (k, &v) in &f.metrics {
                by_metric.entry(k.clone()).or_default().push(v);
            }
        }
        by_metric
            .into_iter()
            .map(|(k, v)| (k, mean_std(&v)))
            .collect()
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fold_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Monte Carlo cross-validation: each fold draws a fresh random train/test
/// split, builds a model (encoder copied from `pretrained` when given),
/// fine-tunes and evaluates. Folds whose test split leaves a metric
/// undefined (one class, no comparable pairs) are skipped with a warning.
pub fn finetune(
    method: &str,
    encoder: &EncoderConfig,
    pretrained: Option<&ParamStore>,
    kind: TaskKind,
    data: &[TaskExample],
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    if data.len() < 2 {
        return Err(HistGenError::invalid("fine-tuning needs at least 2 slides"));
    }
    let outcomes: Vec<(usize, Result<FoldMetrics>)> = (0..config.monte_carlo_folds)
        .into_par_iter()
        .map(|fold| {
            let fold_seed = config.seed.wrapping_add(1_000_003 * fold as u64);
            let run = || -> Result<FoldMetrics> {
                let (tr, te) = fold_split(data.len(), config.train_fraction, fold_seed);
                let train: Vec<TaskExample> = tr.iter().map(|&i| data[i].clone()).collect();
                let test: Vec<TaskExample> = te.iter().map(|&i| data[i].clone()).collect();
                let mut model = TransferModel::new(encoder, kind, config.seed)?;
                if let Some(src) = pretrained {
                    model.load_encoder_from(src);
                }
                train_transfer(&mut model, &train, config, fold_seed)?;
                evaluate_transfer(&model, &test, config.risk)
            };
            (fold, run())
        })
        .collect();
    let mut report = FinetuneReport {
        method: method.to_string(),
        folds: Vec::new(),
        skipped: Vec::new(),
    };
    for (fold, outcome) in outcomes {
        match outcome {
            Ok(metrics) => report.folds.push(FoldResult { fold, metrics }),
            Err(HistGenError::MetricUndefined(reason)) => {
                log::warn!("fold {fold} skipped: {reason}");
                report.skipped.push(fold);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// One row per method, one `mean ± std` column per metric.
pub fn write_finetune_csv(path: &Path, reports: &[FinetuneReport]) -> Result<()> {
    let metrics: Vec<String> = reports
        .first()
        .map(|r| r.summary().into_keys().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_path(path).map_err(|e| HistGenError::invalid(format!("{}: {e}", path.display())))?;
    let mut header = vec!["Method".to_string(), "Folds".to_string()];
    header.extend(metrics.iter().cloned());
    w.write_record(&header)?;
    for r in reports {
        let s = r.summary();
        let mut row = vec![r.method.clone(), r.folds.len().to_string()];
        for m in &metrics {
            row.push(match s.get(m) {
                Some((mean, std)) => format!("{mean:.4} ± {std:.4}"),
                None => "-".to_string(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HistGenError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> EncoderConfig {
        EncoderConfig {
            region_size: 4,
            d_model: 8,
            d_in: 6,
            heads: 2,
            ff_dim: 16,
            dropout: 0.0,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn single_region_pools_to_itself() {
        let m = TransferModel::new(&enc(), TaskKind::Classification { classes: 2 }, 1).unwrap();
        let mut f = Fwd::eval(&m.store);
        let r = f.g.input(Mat::from_shape_fn((1, 8), |(_, c)| c as f64));
        let p = m.pool_wsi(&mut f, r);
        assert_eq!(f.g.value(p.output), f.g.value(r));
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let m = TransferModel::new(&enc(), TaskKind::Classification { classes: 2 }, 1).unwrap();
        let x = Mat::from_shape_fn((5, 8), |(r, c)| ((r * 8 + c) as f64 * 0.7).sin());
        let perm = [3, 0, 4, 1, 2];
        let y = Mat::from_shape_fn((5, 8), |(r, c)| x[[perm[r], c]]);
        let mut f = Fwd::eval(&m.store);
        let a = f.g.input(x);
        let b = f.g.input(y);
        let pa = m.pool_wsi(&mut f, a);
        let pb = m.pool_wsi(&mut f, b);
        let w = f.g.value(pa.weights);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        for (u, v) in f.g.value(pa.output).iter().zip(f.g.value(pb.output)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = TransferModel::new(&enc(), TaskKind::Classification { classes: 3 }, 1).unwrap();
        let p = m.classify(&Mat::from_elem((7, 6), 0.3)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn risk_limits_and_monotonicity() {
        for risk in [RiskScore::CumulativeIncidence, RiskScore::NegLogSurvival] {
            assert!(risk.from_logits(&[-60.0; 4]) < 1e-20);
            let z = [0.2, -0.4, 1.0, -2.0];
            let base = risk.from_logits(&z);
            for j in 0..4 {
                let mut up = z;
                up[j] += 1e-3;
                assert!(risk.from_logits(&up) > base, "{risk:?} bin {j}");
            }
        }
        let z = [0.2, -0.4, 1.0, -2.0];
        let sp: Vec<f64> = z.iter().map(|&v: &f64| (1.0 + v.exp()).ln()).collect();
        let want: f64 = (0..4).map(|j| (4 - j) as f64 * sp[j]).sum();
        assert!((RiskScore::NegLogSurvival.from_logits(&z) - want).abs() < 1e-12);
    }

    #[test]
    fn survival_nll_matches_direct_formula() {
        let store = ParamStore::new(0);
        let z = [0.3, -1.2, 0.8, 0.1];
        let sig = |v: f64| 1.0 / (1.0 + (-v as f64).exp());
        for (bin, censored) in [(0, false), (2, false), (2, true), (3, true)] {
            let mut f = Fwd::eval(&store);
            let logits = f.g.input(Mat::from_shape_vec((1, 4), z.to_vec()).unwrap());
            let l = survival_nll(&mut f, logits, bin, censored);
            let mut want = 0.0;
            for j in 0..bin {
                want -= (1.0 - sig(z[j])).ln();
            }
            if !censored {
                want -= sig(z[bin]).ln();
            }
            assert!((f.g.value(l)[[0, 0]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn quantiles_and_bins() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let e = quantile_edges(&t, 4);
        assert_eq!(e, vec![2.75, 4.5, 6.25]);
        let tied = [12.0, 12.0, 12.0, 12.0, 24.0, 36.0, 36.0, 48.0];
        let bins: Vec<usize> = [12.0, 24.0, 36.0, 48.0]
            .iter()
            .map(|&t| time_bin(&quantile_edges(&tied, 4), t))
            .collect();
        assert_eq!(bins, vec![0, 1, 2, 3]);
        assert_eq!(time_bin(&e, 1.0), 0);
        assert_eq!(time_bin(&e, 4.5), 2);
        assert_eq!(time_bin(&e, 4.4), 1);
        assert_eq!(time_bin(&e, 8.0), 3);
    }

    #[test]
    fn frozen_encoder_only_moves_the_head() {
        let (bags, labels) = synth_classification(6, 2, 6, (3, 6), 0.0, 2).unwrap();
        let data: Vec<TaskExample> = bags
            .iter()
            .zip(&labels)
            .map(|(b, &l)| TaskExample {
                wsi_id: b.wsi_id.clone(),
                features: b.features_f64(),
                target: TaskTarget::Class(l),
            })
            .collect();
        let kind = TaskKind::Classification { classes: 2 };
        let mut m = TransferModel::new(&enc(), kind, 1).unwrap();
        let before = m.store.clone();
        let cfg = FinetuneConfig {
            freeze_encoder: true,
            epochs: 2,
            learning_rate: 1e-2,
            ..FinetuneConfig::default()
        };
        train_transfer(&mut m, &data, &cfg, 0).unwrap();
        for ((_, name, a), (_, _, b)) in before.iter().zip(m.store.iter()) {
            if name.starts_with("encoder.") {
                assert_eq!(a, b, "{name} changed");
            }
        }
        assert_ne!(before.value(m.head.weight), m.store.value(m.head.weight));
    }

    #[test]
    fn mean_std_arithmetic() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
