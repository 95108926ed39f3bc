//! Attentional LSTM encoder-decoder with input feeding and four output
//! layers: untied, tied, fixed-norm (`fixnorm`) and fixed-norm with the
//! lexical translation module (`fixnorm_lex`).

mod diagnostics;
mod forward;

pub use diagnostics::{format_lexicon_row, LexTerms, LexiconEntry, LogitRow, StepState};
pub use forward::{Bound, DecoderState, Encoded, StepOutput, TeacherForced};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Untied,
    Tied,
    Fixnorm,
    FixnormLex,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Untied,
        Variant::Tied,
        Variant::Fixnorm,
        Variant::FixnormLex,
    ];

    pub fn is_fixnorm(self) -> bool {
        matches!(self, Variant::Fixnorm | Variant::FixnormLex)
    }

    pub fn has_lex(self) -> bool {
        self == Variant::FixnormLex
    }

    /// Target embeddings double as output rows.
    pub fn is_tied(self) -> bool {
        self != Variant::Untied
    }

    /// Radius used when none is configured.
    pub fn default_radius(self) -> Option<f64> {
        match self {
            Variant::Fixnorm => Some(5.0),
            Variant::FixnormLex => Some(3.5),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Untied => "untied",
            Variant::Tied => "tied",
            Variant::Fixnorm => "fixnorm",
            Variant::FixnormLex => "fixnorm_lex",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                ModelError::Config(format!(
                    "unknown variant {s:?} (expected untied, tied, fixnorm or fixnorm_lex)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_layers: usize,
    /// Hidden and embedding size.
    pub hidden_size: usize,
    /// Fixed norm of output rows and attentional states; fixnorm variants only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    pub dropout: f64,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// Adds a bias inside the tanh of the lexical hidden layer.
    #[serde(default)]
    pub lex_hidden_bias: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, src_vocab_size: usize, tgt_vocab_size: usize, hidden_size: usize) -> Self {
        ModelConfig {
            variant,
            num_layers: 1,
            hidden_size,
            radius: variant.default_radius(),
            dropout: 0.0,
            src_vocab_size,
            tgt_vocab_size,
            lex_hidden_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.hidden_size == 0 {
            return fail("hidden_size must be positive".into());
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.src_vocab_size == 0 || self.tgt_vocab_size == 0 {
            return fail("vocabulary sizes must be positive".into());
        }
        match (self.variant.is_fixnorm(), self.radius) {
            (true, None) => fail(format!("variant {} requires a radius", self.variant)),
            (true, Some(r)) if !(r > 0.0 && r.is_finite()) => {
                fail(format!("radius must be positive, got {r}"))
            }
            (false, Some(r)) => fail(format!(
                "radius {r} given but variant {} does not use one",
                self.variant
            )),
            _ => Ok(()),
        }
    }

    /// Radius for fixnorm variants. Only valid after `validate`.
    pub fn r(&self) -> f64 {
        self.radius.unwrap_or(1.0)
    }
}

/// Positions of each parameter in [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub out_bias: usize,
    pub out_proj: Option<usize>,
    pub attn_w: usize,
    pub attn_combine: usize,
    /// `(weight[4d × 2d], bias[4d])` per encoder layer.
    pub encoder: Vec<(usize, usize)>,
    /// `(weight, bias)` per decoder layer; layer 0 takes `[emb; feed]`.
    pub decoder: Vec<(usize, usize)>,
    pub lex: Option<LexLayout>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexLayout {
    pub hidden: usize,
    pub hidden_bias: Option<usize>,
    pub out: usize,
    pub bias: usize,
}

/// Named parameter tensors. For fixnorm variants the target embedding and
/// lexical output tables hold unconstrained directions; effective rows are
/// their radius-`r` projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub layout: Layout,
}

impl<T: Real> ModelParams<T> {
    /// Zero-valued parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let (vf, ve) = (config.src_vocab_size, config.tgt_vocab_size);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut add = |name: String, shape: &[usize]| {
            names.push(name);
            tensors.push(Tensor::zeros(shape));
            tensors.len() - 1
        };
        let src_embed = add("src_embed".into(), &[vf, d]);
        let tgt_embed = add("tgt_embed".into(), &[ve, d]);
        let out_bias = add("out_bias".into(), &[ve]);
        let out_proj = (!config.variant.is_tied()).then(|| add("out_proj".into(), &[ve, d]));
        let attn_w = add("attn_w".into(), &[d, d]);
        let attn_combine = add("attn_combine".into(), &[d, 2 * d]);
        let encoder = (0..config.num_layers)
            .map(|l| {
                (
                    add(format!("encoder.{l}.weight"), &[4 * d, 2 * d]),
                    add(format!("encoder.{l}.bias"), &[4 * d]),
                )
            })
            .collect();
        let decoder = (0..config.num_layers)
            .map(|l| {
                let input = if l == 0 { 2 * d } else { d };
                (
                    add(format!("decoder.{l}.weight"), &[4 * d, input + d]),
                    add(format!("decoder.{l}.bias"), &[4 * d]),
                )
            })
            .collect();
        let lex = config.variant.has_lex().then(|| LexLayout {
            hidden: add("lex.hidden".into(), &[d, d]),
            hidden_bias: config
                .lex_hidden_bias
                .then(|| add("lex.hidden_bias".into(), &[d])),
            out: add("lex.out".into(), &[ve, d]),
            bias: add("lex.bias".into(), &[ve]),
        });
        Ok(ModelParams {
            names,
            tensors,
            layout: Layout {
                src_embed,
                tgt_embed,
                out_bias,
                out_proj,
                attn_w,
                attn_combine,
                encoder,
                decoder,
                lex,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Whether a tensor is a bias vector (zero-initialised by default).
    pub fn is_bias(&self, i: usize) -> bool {
        self.tensors[i].shape().len() == 1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Configuration together with parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::zeros(&config)?;
        Ok(Model { config, params })
    }

    /// Effective output row `id` (normalized for fixnorm variants).
    pub fn output_row(&self, id: usize) -> Vec<T> {
        let l = &self.params.layout;
        let table = &self.params.tensors[l.out_proj.unwrap_or(l.tgt_embed)];
        let row = table.row(id);
        if self.config.variant.is_fixnorm() {
            let s = T::lit(self.config.r()) / crate::tensor::guarded_norm(row);
            row.iter().map(|&v| v * s).collect()
        } else {
            row.to_vec()
        }
    }
}
