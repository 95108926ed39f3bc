//! Training run configuration: one TOML file with `[data]`, `[model]` and
//! `[train]` sections. Command-line flags override file values.

use std::path::{Path, PathBuf};

use lexnmt::model::{ModelConfig, Variant};
use lexnmt::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    /// Prebuilt vocabularies; built from the training data when absent.
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub min_count: u64,
    pub max_len: usize,
    /// Append a copy of the training data with per-side hapaxes mapped to UNK.
    pub augment_singleton_unk: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            src_vocab: None,
            tgt_vocab: None,
            out_dir: PathBuf::from("run"),
            min_count: 5,
            max_len: 50,
            augment_singleton_unk: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub num_layers: usize,
    pub hidden_size: usize,
    /// Defaults to 5 for `fixnorm` and 3.5 for `fixnorm_lex`.
    pub radius: Option<f64>,
    pub dropout: f64,
    pub lex_hidden_bias: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::FixnormLex,
            num_layers: 1,
            hidden_size: 512,
            radius: None,
            dropout: 0.2,
            lex_hidden_bias: false,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, src_vocab_size: usize, tgt_vocab_size: usize) -> Result<ModelConfig, UsageError> {
        let radius = match (self.variant.is_fixnorm(), self.radius) {
            (true, r) => r.or(self.variant.default_radius()),
            (false, None) => None,
            (false, Some(r)) => {
                return Err(UsageError(format!(
                    "radius {r} given but variant {} has no fixed norm",
                    self.variant
                )))
            }
        };
        let cfg = ModelConfig {
            variant: self.variant,
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            radius,
            dropout: self.dropout,
            src_vocab_size,
            tgt_vocab_size,
            lex_hidden_bias: self.lex_hidden_bias,
        };
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Self, UsageError> {
        toml::from_str(text).map_err(|e| UsageError(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
