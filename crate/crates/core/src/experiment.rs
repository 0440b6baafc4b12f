//! End-to-end pipelines behind the command-line tool. Each writes its
//! artifacts under the configured run directory and is a deterministic
//! function of the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{synth_generate, write_corpus, write_feature_bag, write_json, DatasetManifest, Split, SyntheticSpec};
use crate::error::{HistGenError, Result};
use crate::metrics::{corpus_scores, NlgScore, NLG_COLUMNS};
use crate::model::{Arm, ReportModel};
use crate::tokenizer::{tokenize, Vocabulary};
use crate::training::{evaluate, fit, make_examples, write_metric_log, Example, FitOutcome, Generation};
use crate::transfer::{
    finetune, synth_classification, synth_survival, write_finetune_csv, FinetuneReport, TaskEntry, TaskKind,
    TaskManifest,
};

pub const REGION_SWEEP: [usize; 6] = [64, 96, 128, 256, 384, 512];

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HistGenError::io(dir, e))
}

pub fn write_resolved_config(cfg: &RunConfig) -> Result<()> {
    ensure_dir(&cfg.paths.run_dir)?;
    write_json(&cfg.paths.run_dir.join("config.json"), cfg)
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub report_pairs: usize,
    pub classification: Option<PathBuf>,
    pub survival: Option<PathBuf>,
}

/// Writes the planted report corpus under `data_dir`, plus classification
/// and survival task corpora under `data_dir/tasks/` when requested.
pub fn synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let s = &cfg.synth;
    let dir = &cfg.paths.data_dir;
    let range = (s.min_patches, s.max_patches);
    let spec = SyntheticSpec::planted(s.num_wsis, s.themes, s.d_in, range, s.noise_scale, cfg.seed);
    let corpus = synth_generate(&spec)?;
    write_corpus(dir, &corpus.bags, &corpus.reports, s.split, cfg.seed)?;
    write_json(&dir.join("truth.json"), &corpus.truth)?;

    let mut summary = SynthSummary {
        report_pairs: corpus.bags.len(),
        classification: None,
        survival: None,
    };
    if s.task_wsis > 0 {
        let (bags, labels) = synth_classification(s.task_wsis, 2, s.d_in, range, 0.0, cfg.seed)?;
        let targets = labels.iter().map(|&c| (Some(c), None, None)).collect();
        summary.classification = Some(write_task(&dir.join("tasks/classification"), &bags, targets)?);

        let (bags, labels) = synth_survival(s.task_wsis, s.d_in, range, s.noise_scale, s.censor_rate, cfg.seed)?;
        let targets = labels.iter().map(|&(t, c)| (None, Some(t), Some(c))).collect();
        summary.survival = Some(write_task(&dir.join("tasks/survival"), &bags, targets)?);
    }
    Ok(summary)
}

type RawTarget = (Option<usize>, Option<f64>, Option<bool>);

fn write_task(dir: &Path, bags: &[crate::data::PatchFeatureBag], targets: Vec<RawTarget>) -> Result<PathBuf> {
    ensure_dir(&dir.join("features"))?;
    let mut entries = Vec::with_capacity(bags.len());
    for (bag, (class, time, censored)) in bags.iter().zip(targets) {
        let rel = PathBuf::from("features").join(format!("{}.hgfeat", bag.wsi_id));
        write_feature_bag(&dir.join(&rel), bag)?;
        entries.push(TaskEntry {
            wsi_id: bag.wsi_id.clone(),
            feature_file: rel,
            class,
            time,
            censored,
        });
    }
    let manifest = TaskManifest {
        d_in: bags.first().map_or(0, |b| b.d_in()),
        entries,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// A report dataset split into encoded examples, with the vocabulary built
/// from the training reports.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = DatasetManifest::load(&cfg.paths.data_dir.join("manifest.json"))?;
    let pairs = manifest.load_pairs()?;
    let train_reports: Vec<_> = pairs
        .iter()
        .filter(|(b, _)| manifest.splits.get(&b.wsi_id) == Some(&Split::Train))
        .map(|(_, r)| r.clone())
        .collect();
    let vocab = Vocabulary::build(&train_reports, cfg.vocab_min_freq)?;
    let examples = make_examples(&pairs, &vocab, cfg.model.decoder.max_len)?;
    let mut ds = Dataset {
        manifest,
        vocab,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for ex in examples {
        match ds.manifest.splits.get(&ex.wsi_id) {
            Some(Split::Train) => ds.train.push(ex),
            Some(Split::Val) => ds.val.push(ex),
            Some(Split::Test) => ds.test.push(ex),
            None => {
                return Err(HistGenError::invalid(format!("{} has no split assignment", ex.wsi_id)));
            }
        }
    }
    Ok(ds)
}

/// `cfg` with the model widths that depend on the data filled in.
pub fn bind_to_data(cfg: &RunConfig, ds: &Dataset) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.model.encoder.d_in = ds.manifest.d_in;
    cfg.model.decoder.vocab_size = ds.vocab.len();
    cfg
}

pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub outcome: FitOutcome,
}

/// Trains the configured arm on an already loaded dataset; writes nothing.
pub fn train_on(cfg: &RunConfig, ds: &Dataset) -> Result<TrainedModel> {
    let cfg = bind_to_data(cfg, ds);
    let mut model = ReportModel::new(&cfg.model, cfg.seed)?;
    let outcome = fit(&mut model, &ds.vocab, &ds.train, &ds.val, &cfg.train)?;
    let checkpoint = Checkpoint {
        model,
        vocab: ds.vocab.clone(),
        epoch: outcome.best_epoch,
        best_metric: outcome.best_bleu4,
        run_config: serde_json::to_value(&cfg)?,
    };
    Ok(TrainedModel { checkpoint, outcome })
}

/// `train`: config.json, metrics.csv and the checkpoint.
pub fn train_run(cfg: &RunConfig) -> Result<TrainedModel> {
    let ds = load_dataset(cfg)?;
    let bound = bind_to_data(cfg, &ds);
    write_resolved_config(&bound)?;
    let trained = train_on(&bound, &ds)?;
    write_metric_log(&cfg.paths.run_dir.join("metrics.csv"), &trained.outcome.log)?;
    save_checkpoint(&cfg.checkpoint_path(), &trained.checkpoint)?;
    Ok(trained)
}

/// `generate`: beam-search reports for one split into generations.json.
pub fn generate_run(cfg: &RunConfig, split: Split) -> Result<Vec<Generation>> {
    let ckpt = load_checkpoint(&cfg.checkpoint_path())?;
    let ds = load_dataset(cfg)?;
    let examples = remap_examples(ds.split(split), &ckpt.vocab, ckpt.model.config.decoder.max_len)?;
    let beam = cfg.model.decoder.beam_size;
    let (_, generations) = evaluate(&ckpt.model, &ckpt.vocab, &examples, beam)?;
    ensure_dir(&cfg.paths.run_dir)?;
    write_json(&cfg.paths.run_dir.join("generations.json"), &generations)?;
    Ok(generations)
}

/// Examples re-encoded with the checkpoint's vocabulary.
fn remap_examples(examples: &[Example], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
    examples
        .iter()
        .map(|e| {
            Ok(Example {
                target: vocab.encode(&e.reference, max_len)?,
                ..e.clone()
            })
        })
        .collect()
}

/// `eval-nlg`: scores a generations file and writes a one-row CSV with the
/// six metric columns.
pub fn eval_nlg(generations: &Path, out_csv: &Path) -> Result<NlgScore> {
    let text = fs::read_to_string(generations).map_err(|e| HistGenError::io(generations, e))?;
    let gens: Vec<serde_json::Value> = serde_json::from_str(&text)?;
    let mut pairs = Vec::with_capacity(gens.len());
    for g in &gens {
        let field = |k: &str| {
            g.get(k).and_then(|v| v.as_str()).map(str::to_string).ok_or_else(|| {
                HistGenError::invalid(format!("{}: entry without string field {k:?}", generations.display()))
            })
        };
        pairs.push((tokenize(&field("generated")?), tokenize(&field("reference")?)));
    }
    if pairs.is_empty() {
        return Err(HistGenError::invalid(format!("{}: no generations", generations.display())));
    }
    let score = corpus_scores(&pairs);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(NLG_COLUMNS)?;
    w.write_record(score.as_row().iter().map(|v| format!("{v:.6}")))?;
    write_bytes(out_csv, w)?;
    Ok(score)
}

fn write_bytes(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| HistGenError::invalid(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| HistGenError::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub best_epoch: usize,
    pub val: Option<NlgScore>,
    pub test: NlgScore,
}

/// Mean relative change over the six metrics, in percent. Metrics where the
/// baseline is zero are left out; `None` when none remain.
pub fn avg_delta(arm: &NlgScore, base: &NlgScore) -> Option<f64> {
    let rel: Vec<f64> = arm
        .as_row()
        .iter()
        .zip(base.as_row())
        .filter(|(_, b)| *b != 0.0)
        .map(|(a, b)| (a - b) / b * 100.0)
        .collect();
    (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64)
}

/// Trains every arm on the train split (selected on val) and scores the
/// test split. Arms run concurrently.
pub fn ablate_on(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<AblationRow>> {
    Arm::ALL
        .par_iter()
        .map(|&arm| {
            let mut c = cfg.clone();
            c.model.arm = arm;
            let trained = train_on(&c, ds)?;
            let model = &trained.checkpoint.model;
            let val = match trained.outcome.best_bleu4 {
                Some(_) => Some(evaluate(model, &ds.vocab, &ds.val, c.model.decoder.beam_size)?.0),
                None => None,
            };
            let test = if ds.test.is_empty() {
                NlgScore::default()
            } else {
                evaluate(model, &ds.vocab, &ds.test, c.model.decoder.beam_size)?.0
            };
            Ok(AblationRow {
                arm,
                best_epoch: trained.outcome.best_epoch,
                val,
                test,
            })
        })
        .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let base = rows
        .iter()
        .find(|r| r.arm == Arm::Base)
        .ok_or_else(|| HistGenError::invalid("ablation table has no Base row"))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["Method"];
    header.extend(NLG_COLUMNS);
    header.push("AVG Δ");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.arm.to_string()];
        rec.extend(r.test.as_row().iter().map(|v| format!("{v:.4}")));
        rec.push(match (r.arm, avg_delta(&r.test, &base.test)) {
            (Arm::Base, _) | (_, None) => "-".to_string(),
            (_, Some(d)) => format!("{d:+.2}%"),
        });
        w.write_record(&rec)?;
    }
    write_bytes(path, w)
}

/// `ablate`: ablation.csv (test split) and ablation.json with validation
/// scores.
pub fn ablate_run(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let ds = load_dataset(cfg)?;
    write_resolved_config(&bind_to_data(cfg, &ds))?;
    let rows = ablate_on(cfg, &ds)?;
    write_ablation_csv(&cfg.paths.run_dir.join("ablation.csv"), &rows)?;
    write_json(&cfg.paths.run_dir.join("ablation.json"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub region_size: usize,
    pub test: NlgScore,
}

/// `ablate --region-sweep`: the hierarchical arm at each region size.
pub fn region_sweep_run(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let ds = load_dataset(cfg)?;
    write_resolved_config(&bind_to_data(cfg, &ds))?;
    let rows: Vec<SweepRow> = REGION_SWEEP
        .par_iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.model.arm = Arm::CmcLgh;
            c.model.encoder.region_size = s;
            let trained = train_on(&c, &ds)?;
            let test = if ds.test.is_empty() {
                NlgScore::default()
            } else {
                evaluate(&trained.checkpoint.model, &ds.vocab, &ds.test, c.model.decoder.beam_size)?.0
            };
            Ok(SweepRow { region_size: s, test })
        })
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["Region size"];
    header.extend(NLG_COLUMNS);
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.region_size.to_string()];
        rec.extend(r.test.as_row().iter().map(|v| format!("{v:.4}")));
        w.write_record(&rec)?;
    }
    write_bytes(&cfg.paths.run_dir.join("region_sweep.csv"), w)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskType {
    Classification,
    Survival,
}

/// `finetune-cls` / `finetune-surv`: Monte Carlo folds from scratch and,
/// when a checkpoint exists, from its encoder. Writes `finetune_<task>.csv`
/// and the per-fold values as JSON.
pub fn finetune_run(cfg: &RunConfig, task: TaskType) -> Result<Vec<FinetuneReport>> {
    let manifest_path = cfg.paths.task_manifest.clone().unwrap_or_else(|| {
        let sub = match task {
            TaskType::Classification => "classification",
            TaskType::Survival => "survival",
        };
        cfg.paths.data_dir.join("tasks").join(sub).join("manifest.json")
    });
    let manifest = TaskManifest::load(&manifest_path)?;
    let kind = match task {
        TaskType::Classification => {
            let classes = manifest.entries.iter().filter_map(|e| e.class).max().map_or(0, |c| c + 1);
            TaskKind::Classification { classes: classes.max(2) }
        }
        TaskType::Survival => TaskKind::Survival {
            bins: cfg.finetune.survival_bins,
        },
    };
    let data = manifest.load_examples(kind)?;
    let ckpt_path = cfg.checkpoint_path();
    let pretrained = if ckpt_path.exists() {
        Some(load_checkpoint(&ckpt_path)?)
    } else {
        log::info!("no checkpoint at {}; fine-tuning from scratch only", ckpt_path.display());
        None
    };
    let mut encoder = match &pretrained {
        Some(c) => c.model.config.encoder.clone(),
        None => cfg.model.encoder.clone(),
    };
    if encoder.d_in != manifest.d_in {
        if pretrained.is_some() {
            return Err(HistGenError::Config(format!(
                "checkpoint expects d_in {}, task features have {}",
                encoder.d_in, manifest.d_in
            )));
        }
        encoder.d_in = manifest.d_in;
    }
    let mut resolved = cfg.clone();
    resolved.model.encoder = encoder.clone();
    write_resolved_config(&resolved)?;

    let mut reports = Vec::new();
    if let Some(c) = &pretrained {
        reports.push(finetune("HistGen (pre-trained)", &encoder, Some(&c.model.store), kind, &data, &cfg.finetune)?);
    }
    reports.push(finetune("HistGen (scratch)", &encoder, None, kind, &data, &cfg.finetune)?);
    let name = match task {
        TaskType::Classification => "finetune_cls",
        TaskType::Survival => "finetune_surv",
    };
    write_finetune_csv(&cfg.paths.run_dir.join(format!("{name}.csv")), &reports)?;
    write_json(&cfg.paths.run_dir.join(format!("{name}_folds.json")), &reports)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(v: f64) -> NlgScore {
        NlgScore {
            bleu: [v; 4],
            meteor_exact: v,
            rouge_l: v,
        }
    }

    #[test]
    fn avg_delta_is_mean_relative_gain() {
        assert!((avg_delta(&score(0.6), &score(0.5)).unwrap() - 20.0).abs() < 1e-9);
        let mut base = score(0.5);
        base.bleu[3] = 0.0;
        let d = avg_delta(&score(0.55), &base).unwrap();
        assert!((d - 10.0).abs() < 1e-9);
        assert_eq!(avg_delta(&score(0.5), &score(0.0)), None);
    }

    #[test]
    fn ablation_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let rows: Vec<AblationRow> = Arm::ALL
            .iter()
            .zip([0.4, 0.5, 0.6])
            .map(|(&arm, v)| AblationRow {
                arm,
                best_epoch: 1,
                val: None,
                test: score(v),
            })
            .collect();
        write_ablation_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Method,BLEU-1,BLEU-2,BLEU-3,BLEU-4,METEOR,ROUGE-L,AVG Δ");
        assert!(lines[1].starts_with("Base,") && lines[1].ends_with(",-"));
        assert!(lines[2].starts_with("+CMC,") && lines[2].ends_with(",+25.00%"));
        assert!(lines[3].starts_with("+CMC+LGH,") && lines[3].ends_with(",+50.00%"));
    }
}
