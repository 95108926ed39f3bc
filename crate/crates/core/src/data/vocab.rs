use std::collections::HashMap;
use std::fmt::Write as _;

use super::DataError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

pub const SPECIALS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN];
pub const NUM_SPECIALS: usize = SPECIALS.len();

/// Token/id map with the four reserved specials at ids 0..4.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized lines, keeping types seen at least
    /// `min_count` times. Ids are assigned by descending count, ties broken
    /// by the token string.
    pub fn build<'a, I, S>(lines: I, min_count: u64) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut any = false;
        for line in lines {
            for tok in line.as_ref() {
                any = true;
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(DataError::EmptyCorpus);
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !SPECIALS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Ok(Self::from_entries(
            kept.into_iter().map(|(t, c)| (t.to_string(), c)),
        ))
    }

    /// Vocabulary with the given non-special entries in id order.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; NUM_SPECIALS];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            ids,
            counts,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIALS
    }

    /// Id of a text token. Unknown tokens and the reserved PAD/BOS/EOS
    /// strings map to UNK.
    pub fn id(&self, token: &str) -> usize {
        match self.ids.get(token) {
            Some(&id) if id != PAD && id != BOS && id != EOS => id,
            _ => UNK,
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Token string for `id`; out-of-range ids decode as the UNK string.
    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids. OOV tokens become UNK. `reverse` flips the order
    /// (source side); `add_bos_eos` wraps in BOS…EOS.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], reverse: bool, add_bos_eos: bool) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.id(t.as_ref())).collect();
        if reverse {
            ids.reverse();
        }
        if add_bos_eos {
            ids.insert(0, BOS);
            ids.push(EOS);
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One `token\tcount` line per id, specials first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            let _ = writeln!(out, "{t}\t{c}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        for (i, special) in SPECIALS.iter().enumerate() {
            let (_, line) = lines.next().ok_or_else(|| DataError::Format {
                what: "vocabulary",
                line: i + 1,
                msg: "missing reserved tokens".into(),
            })?;
            let tok = line.split('\t').next().unwrap_or("");
            if tok != *special {
                return Err(DataError::Format {
                    what: "vocabulary",
                    line: i + 1,
                    msg: format!("expected reserved token {special}, found {tok:?}"),
                });
            }
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let mut parts = line.split('\t');
            let tok = parts.next().unwrap_or("");
            let count = match parts.next() {
                Some(c) => c.parse().map_err(|_| DataError::Format {
                    what: "vocabulary",
                    line: i + 1,
                    msg: format!("bad count {c:?}"),
                })?,
                None => 0,
            };
            if tok.is_empty() {
                return Err(DataError::Format {
                    what: "vocabulary",
                    line: i + 1,
                    msg: "empty token".into(),
                });
            }
            entries.push((tok.to_string(), count));
        }
        let vocab = Self::from_entries(entries);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(DataError::Format {
                what: "vocabulary",
                line: 0,
                msg: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }
}
