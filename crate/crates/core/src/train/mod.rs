//! Initialization, gradient clipping, Adadelta, the epoch loop with
//! dev-BLEU checkpoint selection, and checkpoint persistence.

mod adadelta;
mod checkpoint;

pub use adadelta::Adadelta;
pub use checkpoint::{peek_precision, Checkpoint, Progress, RngState, FORMAT_VERSION, MAGIC};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, Batch, EncodedCorpus, Vocabulary};
use crate::eval;
use crate::infer::{self, BeamConfig};
use crate::model::{Model, ModelError};
use crate::tensor::{Graph, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint stores {found} values but {expected} was requested")]
    Precision { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// One L2 norm over all gradients.
    #[default]
    Global,
    /// Each parameter's gradient clipped on its own.
    PerParameter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    /// Matrices start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    /// Also draw biases from the uniform range instead of zero.
    pub init_biases: bool,
    pub rho: f64,
    pub eps: f64,
    /// Validate every this many epochs (the last epoch always validates).
    pub validate_every: usize,
    pub seed: u64,
    /// Check every op for NaN/Inf during training.
    pub check_finite: bool,
    /// Decoding settings for dev BLEU.
    pub dev_beam: BeamConfig,
    pub dev_replace_unk: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            clip_norm: 5.0,
            clip_mode: ClipMode::Global,
            init_range: 0.01,
            init_biases: false,
            rho: 0.95,
            eps: 1e-6,
            validate_every: 1,
            seed: 1,
            check_finite: false,
            dev_beam: BeamConfig::default(),
            dev_replace_unk: true,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return fail(format!("init_range must be >= 0, got {}", self.init_range));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return fail(format!("need 0 <= rho < 1 and eps > 0, got {} and {}", self.rho, self.eps));
        }
        if self.validate_every == 0 {
            return fail("validate_every must be at least 1".into());
        }
        if self.seed > i64::MAX as u64 {
            return fail(format!("seed must be below 2^63, got {}", self.seed));
        }
        self.dev_beam
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Fills matrices uniformly from `[-range, range]`; biases stay zero unless
/// `include_biases`.
pub fn init_params<T: Real, R: Rng + ?Sized>(model: &mut Model<T>, range: f64, include_biases: bool, rng: &mut R) {
    for i in 0..model.params.len() {
        let bias = model.params.is_bias(i);
        let t = &mut model.params.tensors[i];
        for v in t.data_mut() {
            *v = if bias && !include_biases {
                T::zero()
            } else if range > 0.0 {
                T::lit(rng.gen_range(-range..=range))
            } else {
                T::zero()
            };
        }
    }
}

/// Scales gradients so their norm is at most `max_norm` and returns the
/// global norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], max_norm: f64, mode: ClipMode) -> std::result::Result<f64, usize> {
    let sq: Vec<f64> = grads.iter().map(|g| g.sum_squares().as_f64()).collect();
    if let Some(bad) = sq.iter().position(|s| !s.is_finite()) {
        return Err(bad);
    }
    let global = sq.iter().sum::<f64>().sqrt();
    let rescale = |g: &mut Tensor<T>, norm: f64| {
        if norm > max_norm {
            let s = T::lit(max_norm / norm);
            for v in g.data_mut() {
                *v *= s;
            }
        }
    };
    match mode {
        ClipMode::Global => grads.iter_mut().for_each(|g| rescale(g, global)),
        ClipMode::PerParameter => grads
            .iter_mut()
            .zip(&sq)
            .for_each(|(g, s)| rescale(g, s.sqrt())),
    }
    Ok(global)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub train_ppl: f64,
    pub dev_ppl: Option<f64>,
    pub dev_bleu: Option<f64>,
    pub is_best: bool,
}

impl LogRow {
    pub const HEADER: &'static str = "epoch\tstep\ttrain_ppl\tdev_ppl\tdev_bleu\tis_best";

    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        format!(
            "{}\t{}\t{:.6}\t{}\t{}\t{}",
            self.epoch,
            self.step,
            self.train_ppl,
            opt(self.dev_ppl),
            opt(self.dev_bleu),
            u8::from(self.is_best)
        )
    }
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub ppl: f64,
    pub tokens: usize,
    pub batches: usize,
}

/// Held-out data for validation: tokenized source and reference sides plus
/// the encoded pairs used for perplexity.
#[derive(Clone, Debug, Default)]
pub struct DevSet {
    pub sources: Vec<Vec<String>>,
    pub references: Vec<Vec<String>>,
    pub encoded: EncodedCorpus,
}

/// Mutable training state: model, optimizer, rng and counters.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: Adadelta<T>,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub progress: Progress,
}

impl<T: Real> Trainer<T> {
    /// Fresh trainer with parameters initialized from the configured seed.
    pub fn new(mut model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_params(&mut model, config.init_range, config.init_biases, &mut rng);
        let optimizer = Adadelta::new(&model.params.tensors, config.rho, config.eps);
        Ok(Trainer {
            model,
            optimizer,
            config,
            rng,
            progress: Progress::default(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        Ok(Trainer {
            rng: ck.rng.restore(),
            model: ck.model,
            optimizer: ck.optimizer,
            config: ck.train,
            progress: ck.progress,
        })
    }

    pub fn checkpoint(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            optimizer: self.optimizer.clone(),
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            progress: self.progress.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Forward, backward, clip and update on one batch. Returns the mean
    /// per-token loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new().with_finite_checks(self.config.check_finite);
        let bound = self.model.bind(&mut g, true)?;
        let tf = self
            .model
            .forward_teacher_forced(&mut g, &bound, batch, true, &mut self.rng)?;
        let loss = g.value(tf.loss).item().as_f64();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: self.progress.epoch + 1,
                step: self.progress.step + 1,
            });
        }
        g.backward(tf.loss)?;
        let mut grads: Vec<Tensor<T>> = bound.vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
        drop(g);
        clip_gradients(&mut grads, self.config.clip_norm, self.config.clip_mode).map_err(|i| {
            TrainError::NonFiniteGradient {
                name: self.model.params.names[i].clone(),
            }
        })?;
        self.optimizer.step(&mut self.model.params.tensors, &grads)?;
        self.progress.step += 1;
        Ok(loss)
    }

    /// One pass over shuffled batches of `corpus`.
    pub fn train_epoch(&mut self, corpus: &EncodedCorpus) -> Result<EpochStats> {
        if corpus.is_empty() {
            return Err(TrainError::Config("training corpus is empty".into()));
        }
        let batches = make_batches(corpus, self.config.batch_size, Some(&mut self.rng));
        let (mut nll, mut tokens) = (0.0, 0usize);
        for batch in &batches {
            let loss = self.train_step(batch)?;
            let n = batch.num_tokens();
            nll += loss * n as f64;
            tokens += n;
        }
        self.progress.epoch += 1;
        let loss = nll / tokens as f64;
        Ok(EpochStats {
            loss,
            ppl: loss.exp(),
            tokens,
            batches: batches.len(),
        })
    }

    /// Dev perplexity and dev BLEU with the configured beam.
    pub fn validate(&self, dev: &DevSet, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Result<(Option<f64>, f64)> {
        let ppl = if dev.encoded.is_empty() {
            None
        } else {
            Some(eval::perplexity(&self.model, &dev.encoded, self.config.batch_size)?)
        };
        let outputs = infer::translate_corpus(
            &self.model,
            src_vocab,
            tgt_vocab,
            &dev.sources,
            &self.config.dev_beam,
            self.config.dev_replace_unk,
        );
        let hyps: Vec<Vec<String>> = outputs
            .into_iter()
            .map(|r| r.map(|t| t.tokens).unwrap_or_default())
            .collect();
        let bleu = eval::bleu(&hyps, &dev.references, 4)?.bleu;
        Ok((ppl, bleu))
    }
}

/// Result of [`train`]. `aborted` is set when a non-finite loss or gradient
/// stopped training early; `best` is then the last good selection.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub latest: Checkpoint<T>,
    pub log: Vec<LogRow>,
    pub aborted: Option<String>,
}

/// Runs epochs until `config.epochs`, validating on `dev` and keeping the
/// checkpoint with the highest dev BLEU (the latest one without a dev set).
/// `on_row` sees each log row as it is produced.
pub fn train<T: Real>(
    trainer: &mut Trainer<T>,
    corpus: &EncodedCorpus,
    dev: Option<&DevSet>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    let mut best = trainer.checkpoint(src_vocab, tgt_vocab);
    let mut log = Vec::new();
    let mut aborted = None;
    let mut epoch_nll = (0.0, 0usize);
    while trainer.progress.epoch < trainer.config.epochs {
        let stats = match trainer.train_epoch(corpus) {
            Ok(s) => s,
            Err(e @ (TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. })) => {
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        epoch_nll.0 += stats.loss * stats.tokens as f64;
        epoch_nll.1 += stats.tokens;
        let epoch = trainer.progress.epoch;
        if !epoch.is_multiple_of(trainer.config.validate_every) && epoch != trainer.config.epochs {
            continue;
        }
        let train_ppl = (epoch_nll.0 / epoch_nll.1 as f64).exp();
        epoch_nll = (0.0, 0);
        let (dev_ppl, dev_bleu) = match dev {
            Some(d) => {
                let (p, b) = trainer.validate(d, src_vocab, tgt_vocab)?;
                (p, Some(b))
            }
            None => (None, None),
        };
        let is_best = match (dev_bleu, trainer.progress.best_metric) {
            (Some(b), Some(prev)) => b > prev,
            _ => true,
        };
        if is_best {
            trainer.progress.best_metric = dev_bleu;
            trainer.progress.best_epoch = Some(epoch);
        }
        let row = LogRow {
            epoch,
            step: trainer.progress.step,
            train_ppl,
            dev_ppl,
            dev_bleu,
            is_best,
        };
        on_row(&row);
        log.push(row);
        if is_best {
            best = trainer.checkpoint(src_vocab, tgt_vocab);
        }
    }
    Ok(TrainOutcome {
        best,
        latest: trainer.checkpoint(src_vocab, tgt_vocab),
        log,
        aborted,
    })
}
