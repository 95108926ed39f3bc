use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::DataError;

/// Suffix marking a subword that continues into the next one.
pub const CONTINUATION: &str = "@@";

/// Ordered merge list learned by byte-pair encoding over characters.
///
/// Non-final pieces of a word carry the `@@` suffix, so `undo` can rejoin
/// them. Words that themselves end in `@@` are not representable.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn chars(word: &str) -> Vec<String> {
    word.chars().map(String::from).collect()
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        BpeModel { merges, ranks }
    }

    /// Learns up to `n_merges` merges, each time merging the most frequent
    /// adjacent symbol pair. Ties go to the lexicographically smallest
    /// `(left, right)`. Stops early once every word is a single symbol.
    pub fn learn<'a, I, S>(lines: I, n_merges: usize) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for line in lines {
            for w in line.as_ref() {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, u64)> =
            freq.into_iter().map(|(w, c)| (chars(w), c)).collect();
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, c) in &words {
                for p in syms.windows(2) {
                    *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                if syms.len() > 1 {
                    *syms = merge_pair(syms, &l, &r);
                }
            }
            merges.push((l, r));
        }
        Self::from_merges(merges)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Pieces of one word without continuation markers.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = chars(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                .min();
            let Some(&rank) = best else { break };
            let (l, r) = &self.merges[rank];
            syms = merge_pair(&syms, l, r);
        }
        syms
    }

    /// Segments each token, marking all but the last piece with `@@`.
    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
        let mut out = Vec::new();
        for tok in tokens {
            let tok = tok.as_ref();
            let pieces = cache.entry(tok).or_insert_with(|| {
                let mut p = self.segment_word(tok);
                let last = p.len().saturating_sub(1);
                for piece in &mut p[..last] {
                    piece.push_str(CONTINUATION);
                }
                p
            });
            out.extend(pieces.iter().cloned());
        }
        out
    }

    /// Rejoins `@@`-marked pieces into words.
    pub fn undo<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for piece in subwords {
            let piece = piece.as_ref();
            match piece.strip_suffix(CONTINUATION) {
                Some(head) => cur.push_str(head),
                None => {
                    cur.push_str(piece);
                    out.push(std::mem::take(&mut cur));
                }
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    /// One `left right` pair per line, in merge order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(DataError::Format {
                        what: "BPE model",
                        line: i + 1,
                        msg: format!("expected `left right`, found {line:?}"),
                    })
                }
            }
        }
        Ok(Self::from_merges(merges))
    }
}
