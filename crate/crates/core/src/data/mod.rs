//! Corpus handling: vocabularies, length filtering, batching and BPE.

mod batch;
mod bpe;
mod vocab;

pub use batch::{make_batches, Batch, EncodedCorpus, EncodedPair};
pub use bpe::{BpeModel, CONTINUATION};
pub use vocab::{
    Vocabulary, BOS, BOS_TOKEN, EOS, EOS_TOKEN, NUM_SPECIALS, PAD, PAD_TOKEN, SPECIALS, UNK,
    UNK_TOKEN,
};

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("parallel files have different line counts: source {source_lines}, target {target_lines}")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("malformed {what} at line {line}: {msg}")]
    Format {
        what: &'static str,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

/// Reads a UTF-8 file of whitespace-tokenized sentences, one per line.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(tokenize).collect())
}

/// Line-aligned source/target sentences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl ParallelCorpus {
    pub fn new(source: Vec<Vec<String>>, target: Vec<Vec<String>>) -> Result<Self, DataError> {
        if source.len() != target.len() {
            return Err(DataError::LineCountMismatch {
                source_lines: source.len(),
                target_lines: target.len(),
            });
        }
        Ok(ParallelCorpus {
            pairs: source.into_iter().zip(target).collect(),
        })
    }

    pub fn read(source: &Path, target: &Path) -> Result<Self, DataError> {
        Self::new(read_lines(source)?, read_lines(target)?)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Vec<String>> {
        self.pairs.iter().map(|p| &p.0)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Vec<String>> {
        self.pairs.iter().map(|p| &p.1)
    }

    /// Drops pairs where either side is empty or longer than `max_len`
    /// tokens.
    pub fn filter_by_length(&self, max_len: usize) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self
                .pairs
                .iter()
                .filter(|(s, t)| {
                    !s.is_empty() && !t.is_empty() && s.len() <= max_len && t.len() <= max_len
                })
                .cloned()
                .collect(),
        }
    }

    /// The corpus followed by a copy in which every type occurring exactly
    /// once on its side is replaced by the UNK token.
    pub fn augment_singleton_unk(&self) -> ParallelCorpus {
        let src_hapax = hapaxes(self.sources());
        let tgt_hapax = hapaxes(self.targets());
        let mask = |sent: &[String], hapax: &HashMap<&str, u64>| -> Vec<String> {
            sent.iter()
                .map(|t| {
                    if hapax.get(t.as_str()) == Some(&1) {
                        UNK_TOKEN.to_string()
                    } else {
                        t.clone()
                    }
                })
                .collect()
        };
        let mut pairs = self.pairs.clone();
        pairs.extend(
            self.pairs
                .iter()
                .map(|(s, t)| (mask(s, &src_hapax), mask(t, &tgt_hapax))),
        );
        ParallelCorpus { pairs }
    }

    /// Encodes both sides (original order, no BOS/EOS).
    pub fn encode(&self, src: &Vocabulary, tgt: &Vocabulary) -> EncodedCorpus {
        EncodedCorpus {
            pairs: self
                .pairs
                .iter()
                .map(|(s, t)| EncodedPair {
                    src: src.encode(s, false, false),
                    tgt: tgt.encode(t, false, false),
                })
                .collect(),
        }
    }
}

fn hapaxes<'a>(side: impl Iterator<Item = &'a Vec<String>>) -> HashMap<&'a str, u64> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for sent in side {
        for t in sent {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    counts
}

/// Fraction of tokens in `lines` that map to UNK under `vocab`.
pub fn unk_rate(lines: impl IntoIterator<Item = impl AsRef<[String]>>, vocab: &Vocabulary) -> f64 {
    let (mut unk, mut total) = (0usize, 0usize);
    for line in lines {
        for t in line.as_ref() {
            total += 1;
            if !vocab.contains(t) || t == UNK_TOKEN {
                unk += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unk as f64 / total as f64
    }
}
