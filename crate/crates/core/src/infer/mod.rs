//! Beam-search decoding with length normalization and attention-based
//! unknown-word replacement.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, Vocabulary, BOS, EOS, PAD, UNK_TOKEN};
use crate::model::{Model, ModelError};
use crate::tensor::{Graph, Real};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("cannot translate an empty source sentence")]
    EmptySource,
    #[error("invalid beam config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for InferError {
    fn from(e: crate::tensor::TensorError) -> Self {
        InferError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, InferError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    /// Maximum generated length including EOS; `None` means `2·S + 10`.
    pub max_len: Option<usize>,
    /// Divide candidate scores by `lp` while pruning as well. Candidates of
    /// one step share a length, so the pruned beam is the same either way.
    pub normalize_during_pruning: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 12,
            alpha: 0.8,
            max_len: None,
            normalize_during_pruning: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(InferError::Config("beam_size must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(InferError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.max_len == Some(0) {
            return Err(InferError::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn max_len_for(&self, src_len: usize) -> usize {
        self.max_len.unwrap_or(2 * src_len + 10)
    }
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids after BOS; ends with EOS when `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Attention per generated token over encoder (reversed) positions.
    pub attention: Vec<Vec<f64>>,
    pub finished: bool,
}

impl Hypothesis {
    /// `log p / lp(|e|)` with `|e|` counting EOS.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len().max(1), alpha)
    }

    /// Output ids without the trailing EOS.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Completed hypotheses by descending score; unfinished ones only when
    /// nothing completed.
    pub nbest: Vec<Hypothesis>,
}

fn sort_by_score(hyps: &mut [Hypothesis], alpha: f64) {
    hyps.sort_by(|a, b| {
        b.score(alpha)
            .partial_cmp(&a.score(alpha))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Beam search for one source sentence given in original order.
///
/// Each step expands every live hypothesis over the target vocabulary
/// (never PAD or BOS) and ranks candidates by cumulative log-probability.
/// EOS candidates among the top `beam_size` enter the completed pool; the
/// live beam is refilled with the best non-EOS candidates. Search stops once
/// the pool holds `beam_size` hypotheses, the beam empties, or `max_len` is
/// reached. The result maximizes `log p / lp` over the pool.
pub fn beam_search<T: Real>(model: &Model<T>, src: &[usize], cfg: &BeamConfig) -> Result<BeamResult> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(InferError::EmptySource);
    }
    let k = cfg.beam_size;
    let max_len = cfg.max_len_for(src.len());
    let ve = model.config.tgt_vocab_size;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut g = Graph::<T>::new();
    let bound = model.bind(&mut g, false)?;
    let enc1 = model.encode(&mut g, &bound, &Batch::source_only(src), false, &mut rng)?;
    let mut state = model.init_decoder(&mut g, &enc1);

    let mut live = vec![Hypothesis {
        tokens: vec![],
        log_prob: 0.0,
        attention: vec![],
        finished: false,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        let n = live.len();
        let rows = vec![0; n];
        let mut enc = enc1.clone();
        enc.batch = n;
        enc.states = g.gather_rows(enc1.states, &rows)?;
        enc.src_embed = match enc1.src_embed {
            Some(e) => Some(g.gather_rows(e, &rows)?),
            None => None,
        };
        enc.mask = enc1.mask.repeat(n);
        let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let (out, next) = model.decoder_step(&mut g, &bound, &enc, &state, &prev, false, &mut rng)?;
        let logits = model.output_logits(&mut g, &bound, out.h_tilde, out.h_lex)?;
        let logp = g.log_softmax_rows(logits)?;
        let logp = g.value(logp);
        let attn = g.value(out.attention);

        let lp = if cfg.normalize_during_pruning {
            length_penalty(step + 1, cfg.alpha)
        } else {
            1.0
        };
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(n * ve);
        for (i, h) in live.iter().enumerate() {
            let row = logp.row(i);
            for (v, &lpv) in row.iter().enumerate() {
                if v == PAD || v == BOS {
                    continue;
                }
                cands.push((h.log_prob + lpv.as_f64(), i, v));
            }
        }
        cands.sort_by(|a, b| {
            (b.0 / lp)
                .partial_cmp(&(a.0 / lp))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut next_live = Vec::with_capacity(k);
        let mut parents = Vec::with_capacity(k);
        for (rank, &(score, i, v)) in cands.iter().enumerate() {
            if next_live.len() == k {
                break;
            }
            let extend = |h: &Hypothesis| {
                let mut tokens = h.tokens.clone();
                tokens.push(v);
                let mut attention = h.attention.clone();
                attention.push(attn.row(i).iter().map(|a| a.as_f64()).collect());
                Hypothesis {
                    tokens,
                    log_prob: score,
                    attention,
                    finished: v == EOS,
                }
            };
            if v == EOS {
                if rank < k {
                    completed.push(extend(&live[i]));
                }
            } else {
                next_live.push(extend(&live[i]));
                parents.push(i);
            }
        }
        live = next_live;
        if completed.len() >= k || live.is_empty() || step + 1 == max_len {
            break;
        }
        state.h = next.h.iter().map(|&v| g.gather_rows(v, &parents)).collect::<std::result::Result<_, _>>()?;
        state.c = next.c.iter().map(|&v| g.gather_rows(v, &parents)).collect::<std::result::Result<_, _>>()?;
        state.feed = g.gather_rows(next.feed, &parents)?;
    }

    let mut nbest = if completed.is_empty() { live } else { completed };
    sort_by_score(&mut nbest, cfg.alpha);
    let best = nbest[0].clone();
    Ok(BeamResult { best, nbest })
}

/// Index of the largest weight, lowest original position on ties, mapped
/// from encoder (reversed) order back to original order.
pub fn aligned_source_position(weights: &[f64]) -> usize {
    let s = weights.len();
    let mut best = 0;
    for orig in 1..s {
        if weights[s - 1 - orig] > weights[s - 1 - best] {
            best = orig;
        }
    }
    best
}

/// Replaces every UNK token with the source word (original order) that
/// received the most attention at that step.
pub fn unk_replace(tokens: &[String], attention: &[Vec<f64>], src: &[String]) -> Vec<String> {
    tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| match attention.get(t) {
            Some(w) if tok == UNK_TOKEN && w.len() == src.len() && !w.is_empty() => {
                src[aligned_source_position(w)].clone()
            }
            _ => tok.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub tokens: Vec<String>,
    /// `[T×S]` attention in original source order, one row per output token
    /// (EOS excluded).
    pub attention: Vec<Vec<f64>>,
    pub log_prob: f64,
    pub score: f64,
}

/// Translates one tokenized sentence.
pub fn translate_sentence<T: Real>(
    model: &Model<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    sentence: &[String],
    cfg: &BeamConfig,
    replace_unk: bool,
) -> Result<Translation> {
    let ids = src_vocab.encode(sentence, false, false);
    let res = beam_search(model, &ids, cfg)?;
    let words = res.best.words();
    let mut tokens = tgt_vocab.decode(words);
    let rev_attention = &res.best.attention[..words.len()];
    if replace_unk {
        tokens = unk_replace(&tokens, rev_attention, sentence);
    }
    let attention = rev_attention
        .iter()
        .map(|w| w.iter().rev().copied().collect())
        .collect();
    Ok(Translation {
        tokens,
        attention,
        log_prob: res.best.log_prob,
        score: res.best.score(cfg.alpha),
    })
}

/// Translates sentences in parallel, keeping input order. Failures are
/// returned per line and do not stop the run.
pub fn translate_corpus<T: Real>(
    model: &Model<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    sentences: &[Vec<String>],
    cfg: &BeamConfig,
    replace_unk: bool,
) -> Vec<Result<Translation>> {
    sentences
        .par_iter()
        .map(|s| translate_sentence(model, src_vocab, tgt_vocab, s, cfg, replace_unk))
        .collect()
}

/// `SENT i T S` followed by `T` rows of `S` weights.
pub fn format_attention(index: usize, attention: &[Vec<f64>], src_len: usize) -> String {
    let mut out = format!("SENT {index} {} {src_len}\n", attention.len());
    for row in attention {
        let cells: Vec<String> = row.iter().map(|w| format!("{w:.6}")).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}
