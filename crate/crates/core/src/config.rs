use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HistGenError, Result};
use crate::model::ModelConfig;
use crate::tokenizer::DEFAULT_MIN_FREQ;
use crate::training::TrainConfig;
use crate::transfer::FinetuneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory holding `manifest.json`.
    pub data_dir: PathBuf,
    /// Output directory of the run.
    pub run_dir: PathBuf,
    /// Checkpoint to start from; defaults to `<run_dir>/model.ckpt` where a
    /// command needs one.
    pub checkpoint: Option<PathBuf>,
    /// Labelled manifest for fine-tuning commands.
    pub task_manifest: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            task_manifest: None,
        }
    }
}

/// Shape of the planted corpora written by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_wsis: usize,
    pub themes: usize,
    pub d_in: usize,
    pub min_patches: usize,
    pub max_patches: usize,
    pub noise_scale: f64,
    /// Train / val / test fractions.
    pub split: [f64; 3],
    /// Size of the classification and survival task corpora; `0` skips
    /// them.
    pub task_wsis: usize,
    pub censor_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_wsis: 20,
            themes: 6,
            d_in: 1024,
            min_patches: 16,
            max_patches: 48,
            noise_scale: 0.5,
            split: [0.7, 0.15, 0.15],
            task_wsis: 40,
            censor_rate: 0.2,
        }
    }
}

/// Everything a command needs. `seed` is the single source of randomness:
/// it overrides the seeds of the training and fine-tuning sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub vocab_min_freq: usize,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            vocab_min_freq: DEFAULT_MIN_FREQ,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HistGenError::io(path, e))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
        .map_err(|e| match e {
            HistGenError::Config(m) => HistGenError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HistGenError::Config(e.message().to_string()))?;
        cfg.resolved()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HistGenError::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HistGenError::Config(e.to_string()))
    }

    /// Propagates `seed` and validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
        self.train.validate()?;
        self.finetune.validate()?;
        self.model.encoder.validate()?;
        if self.synth.min_patches == 0 || self.synth.min_patches > self.synth.max_patches {
            return Err(HistGenError::Config("synth patch range must satisfy 1 <= min <= max".into()));
        }
        Ok(self)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.run_dir.join("model.ckpt"))
    }
}
