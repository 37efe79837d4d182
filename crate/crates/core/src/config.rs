//! Run configuration: model, masking prior, training schedule, tokenizer and
//! file locations, plus the bundled presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizerKind;
use crate::error::{Error, Result};
use crate::masking::MaskingPrior;
use crate::objectives::EmptyMaskPolicy;
use crate::optim::AdamConfig;
use crate::sequence::NUM_SPECIAL;
use crate::transformer::{AttentionMode, TransformerConfig};

pub const PRESET_NAMES: [&str; 3] = ["upmlm", "bert-like", "gpt-like"];

const UPMLM: &str = include_str!("../presets/upmlm.json");
const BERT_LIKE: &str = include_str!("../presets/bert-like.json");
const GPT_LIKE: &str = include_str!("../presets/gpt-like.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub empty_mask_policy: EmptyMaskPolicy,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

/// `model.vocab_size` is replaced by the size of the vocabulary built from the
/// training corpus when training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: TransformerConfig,
    /// Required for bidirectional models, forbidden for causal ones.
    #[serde(default)]
    pub prior: Option<MaskingPrior>,
    pub training: TrainingConfig,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
    #[serde(default)]
    pub corpus: CorpusPaths,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub loss_log: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "upmlm" => UPMLM,
            "bert-like" => BERT_LIKE,
            "gpt-like" => GPT_LIKE,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Rejects inconsistent combinations before any data is read.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(NUM_SPECIAL + 1);
        model.validate()?;
        match (self.model.attention_mode, &self.prior) {
            (AttentionMode::Causal, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "a masking prior applies to masked training only; remove it for a causal model".into(),
                ))
            }
            (AttentionMode::Bidirectional, None) => {
                return Err(Error::InvalidConfig("a bidirectional model needs a masking prior".into()))
            }
            _ => {}
        }
        let t = &self.training;
        if t.steps == 0 || t.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be positive".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {} must be positive", t.learning_rate)));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!("weight_decay {} must be non-negative", t.weight_decay)));
        }
        Ok(())
    }
}
