//! The report-generation model and its ablation arms.
//!
//! | arm        | visual path                                  | text path          |
//! |------------|----------------------------------------------|--------------------|
//! | `base`     | projection, mean pool to one pseudo-region   | decoder            |
//! | `+cmc`     | as `base`, then the memory visual pass       | memory text pass   |
//! | `+cmc+lgh` | hierarchical encoder, then memory visual pass | memory text pass  |
//!
//! Parameters are initialised per name, so components shared by two arms
//! start from identical values under the same seed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cmc::{CmcConfig, CmcModule};
use crate::decoder::{DecoderConfig, GenerationOutput, Generator, ReportDecoder};
use crate::error::{HistGenError, Result};
use crate::lgh::{EncoderConfig, LghEncoder};
use crate::nn::{Fwd, Linear, Mat, ParamStore, Var};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "+cmc")]
    Cmc,
    #[serde(rename = "+cmc+lgh")]
    CmcLgh,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Base, Arm::Cmc, Arm::CmcLgh];

    pub fn key(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::Cmc => "+cmc",
            Arm::CmcLgh => "+cmc+lgh",
        }
    }

    pub fn uses_cmc(self) -> bool {
        self != Arm::Base
    }

    pub fn uses_lgh(self) -> bool {
        self == Arm::CmcLgh
    }
}

/// Row label used in the ablation table.
impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Base => "Base",
            Arm::Cmc => "+CMC",
            Arm::CmcLgh => "+CMC+LGH",
        })
    }
}

impl FromStr for Arm {
    type Err = HistGenError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Arm::Base),
            "+cmc" | "cmc" => Ok(Arm::Cmc),
            "+cmc+lgh" | "cmc+lgh" | "cmc-lgh" => Ok(Arm::CmcLgh),
            _ => Err(HistGenError::Config(format!(
                "unknown arm {s:?} (expected base, +cmc or +cmc+lgh)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arm: Arm,
    pub encoder: EncoderConfig,
    pub cmc: CmcConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arm: Arm::CmcLgh,
            encoder: EncoderConfig::default(),
            cmc: CmcConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.arm.uses_cmc() {
            self.cmc.validate(self.decoder.d_model)?;
        }
        if self.encoder.d_model != self.decoder.d_model {
            return Err(HistGenError::Config(format!(
                "encoder d_model {} differs from decoder d_model {}",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum VisualEncoder {
    MeanPool { proj: Linear },
    Hierarchical(LghEncoder),
}

#[derive(Clone, Debug)]
pub struct ReportModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub cmc: Option<CmcModule>,
    pub decoder: ReportDecoder,
}

impl ReportModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let visual = if config.arm.uses_lgh() {
            VisualEncoder::Hierarchical(LghEncoder::new(&mut store, "encoder", &config.encoder)?)
        } else {
            let e = &config.encoder;
            VisualEncoder::MeanPool {
                proj: Linear::new(&mut store, "encoder.input_proj", e.d_in, e.d_model),
            }
        };
        let cmc = if config.arm.uses_cmc() {
            Some(CmcModule::new(&mut store, "cmc", &config.cmc, config.decoder.d_model)?)
        } else {
            None
        };
        let decoder = ReportDecoder::new(&mut store, "decoder", &config.decoder)?;
        Ok(Self {
            config: config.clone(),
            store,
            visual,
            cmc,
            decoder,
        })
    }

    pub fn arm(&self) -> Arm {
        self.config.arm
    }

    /// Decoder memory for `n×d_in` features: the region representations
    /// (one pseudo-region for the mean-pool arms) after the memory visual
    /// pass when the arm has one.
    pub fn encode_visual(&self, f: &mut Fwd, features: Var) -> Result<Var> {
        let (n, d) = f.g.shape(features);
        if n == 0 {
            return Err(HistGenError::invalid("empty feature bag"));
        }
        if d != self.config.encoder.d_in {
            return Err(HistGenError::shape(format!(
                "features have dimension {d}, model expects {}",
                self.config.encoder.d_in
            )));
        }
        f.set_dropout_rate(self.config.encoder.dropout);
        let regions = match &self.visual {
            VisualEncoder::MeanPool { proj } => {
                let x = proj.forward(f, features);
                f.g.mean_rows(x)
            }
            VisualEncoder::Hierarchical(lgh) => lgh.forward(f, features)?.reps,
        };
        let out = match &self.cmc {
            Some(cmc) => cmc.visual_pass(f, regions)?.output,
            None => regions,
        };
        f.set_dropout_rate(self.config.decoder.dropout);
        Ok(out)
    }

    /// Teacher-forced logits (one row per predicted token) and the targets
    /// they predict.
    pub fn forward(&self, f: &mut Fwd, features: &Mat, target: &TokenSequence) -> Result<(Var, Vec<usize>)> {
        let x = f.g.input(features.clone());
        let visual = self.encode_visual(f, x)?;
        self.decoder.teacher_forcing(f, visual, target, self.cmc.as_ref())
    }

    /// Evaluation-mode teacher-forced logits as a plain matrix.
    pub fn logits(&self, features: &Mat, target: &TokenSequence) -> Result<Mat> {
        let mut f = Fwd::eval(&self.store);
        let (logits, _) = self.forward(&mut f, features, target)?;
        Ok(f.g.value(logits).clone())
    }

    /// Evaluation-mode decoder memory as a plain matrix.
    pub fn visual_context(&self, features: &Mat) -> Result<Mat> {
        let mut f = Fwd::eval(&self.store);
        let x = f.g.input(features.clone());
        let v = self.encode_visual(&mut f, x)?;
        Ok(f.g.value(v).clone())
    }

    pub fn generator<'a>(&'a self, visual: &'a Mat) -> Generator<'a> {
        Generator {
            decoder: &self.decoder,
            cmc: self.cmc.as_ref(),
            store: &self.store,
            visual,
        }
    }

    /// Beam-search report for one bag. The length budget counts `BOS` and
    /// `EOS`, as in training.
    pub fn generate(&self, features: &Mat, beam_size: usize) -> Result<GenerationOutput> {
        let visual = self.visual_context(features)?;
        let max_new = self.config.decoder.max_len.saturating_sub(1);
        self.generator(&visual).beam_search(beam_size, max_new)
    }
}
