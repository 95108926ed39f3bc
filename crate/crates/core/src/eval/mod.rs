//! Corpus BLEU, perplexity and paired bootstrap resampling.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::data::{make_batches, EncodedCorpus};
use crate::model::{Model, ModelError};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis and reference counts differ: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("max_n must be at least 1")]
    BadOrder,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Clipped n-gram matches and totals for one sentence pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SentenceStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl SentenceStats {
    pub fn new<S: AsRef<str>>(hyp: &[S], reference: &[S], max_n: usize) -> Self {
        let hyp: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
        let reference: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
        let mut matches = vec![0; max_n];
        let mut totals = vec![0; max_n];
        for n in 1..=max_n {
            let ref_counts = ngram_counts(&reference, n);
            let hyp_counts = ngram_counts(&hyp, n);
            matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
            totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
        }
        SentenceStats {
            matches,
            totals,
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
        }
    }

    fn add(&mut self, other: &SentenceStats) {
        if self.matches.is_empty() {
            self.matches = vec![0; other.matches.len()];
            self.totals = vec![0; other.totals.len()];
        }
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], u64> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Score on a 0–100 scale.
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuReport {
    pub fn from_stats(stats: &SentenceStats) -> Self {
        let precisions: Vec<f64> = stats
            .matches
            .iter()
            .zip(&stats.totals)
            .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
            .collect();
        let brevity_penalty = if stats.hyp_len == 0 {
            0.0
        } else if stats.hyp_len < stats.ref_len {
            (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
        } else {
            1.0
        };
        let bleu = if precisions.contains(&0.0) {
            0.0
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
            100.0 * brevity_penalty * mean_log.exp()
        };
        BleuReport {
            bleu,
            precisions,
            brevity_penalty,
            hyp_len: stats.hyp_len,
            ref_len: stats.ref_len,
        }
    }

    /// `key = value` lines: bleu, p1..pN, bp, hyp_len, ref_len.
    pub fn to_text(&self) -> String {
        let mut out = format!("bleu = {:.4}\n", self.bleu);
        for (i, p) in self.precisions.iter().enumerate() {
            let _ = writeln!(out, "p{} = {p:.6}", i + 1);
        }
        let _ = writeln!(out, "bp = {:.6}", self.brevity_penalty);
        let _ = writeln!(out, "hyp_len = {}", self.hyp_len);
        let _ = writeln!(out, "ref_len = {}", self.ref_len);
        out
    }
}

fn sentence_stats<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<Vec<SentenceStats>> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if max_n == 0 {
        return Err(EvalError::BadOrder);
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| SentenceStats::new(h, r, max_n))
        .collect())
}

fn total(stats: &[SentenceStats], max_n: usize) -> SentenceStats {
    let mut acc = SentenceStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        ..Default::default()
    };
    for s in stats {
        acc.add(s);
    }
    acc
}

/// Tokenized, case-sensitive, single-reference corpus BLEU without
/// smoothing.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<BleuReport> {
    let stats = sentence_stats(hyps, refs, max_n)?;
    Ok(BleuReport::from_stats(&total(&stats, max_n)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceReport {
    /// Fraction of resamples where system B scores at least system A.
    pub p_value: f64,
    pub resamples: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub bleu_a: f64,
    pub bleu_b: f64,
}

impl SignificanceReport {
    pub fn to_text(&self) -> String {
        format!(
            "bleu_a = {:.4}\nbleu_b = {:.4}\nmean_a = {:.4}\nmean_b = {:.4}\nresamples = {}\np_value = {:.4}\n",
            self.bleu_a, self.bleu_b, self.mean_a, self.mean_b, self.resamples, self.p_value
        )
    }
}

/// Paired bootstrap test of "A is better than B": resamples sentence
/// indices with replacement and counts how often B's BLEU reaches A's.
pub fn bootstrap_significance<S: AsRef<str>, R: Rng + ?Sized>(
    hyps_a: &[Vec<S>],
    hyps_b: &[Vec<S>],
    refs: &[Vec<S>],
    resamples: usize,
    rng: &mut R,
) -> Result<SignificanceReport> {
    const MAX_N: usize = 4;
    let a = sentence_stats(hyps_a, refs, MAX_N)?;
    let b = sentence_stats(hyps_b, refs, MAX_N)?;
    let n = refs.len();
    if n == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    let (mut hits, mut sum_a, mut sum_b) = (0usize, 0.0, 0.0);
    for _ in 0..resamples {
        let mut ta = total(&[], MAX_N);
        let mut tb = total(&[], MAX_N);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            ta.add(&a[i]);
            tb.add(&b[i]);
        }
        let ba = BleuReport::from_stats(&ta).bleu;
        let bb = BleuReport::from_stats(&tb).bleu;
        sum_a += ba;
        sum_b += bb;
        if bb >= ba {
            hits += 1;
        }
    }
    let denom = resamples.max(1) as f64;
    Ok(SignificanceReport {
        p_value: if resamples == 0 { 1.0 } else { hits as f64 / denom },
        resamples,
        mean_a: sum_a / denom,
        mean_b: sum_b / denom,
        bleu_a: BleuReport::from_stats(&total(&a, MAX_N)).bleu,
        bleu_b: BleuReport::from_stats(&total(&b, MAX_N)).bleu,
    })
}

/// `exp` of the mean teacher-forced NLL over all target tokens (EOS
/// included), in evaluation mode.
pub fn perplexity<T: Real>(model: &Model<T>, corpus: &EncodedCorpus, batch_size: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for batch in make_batches::<rand::rngs::mock::StepRng>(corpus, batch_size, None) {
        let n = batch.num_tokens();
        nll += model.batch_loss(&batch)? * n as f64;
        tokens += n;
    }
    Ok((nll / tokens as f64).exp())
}
