//! Synthetic corpora and small numeric oracles shared by integration tests.

#![allow(dead_code)]

use std::collections::HashMap;

use lexnmt::data::{EncodedCorpus, ParallelCorpus, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Word-for-word translation data: source word `s{i}` always translates to
/// `t{perm[i]}` in the same position.
pub struct DictionaryCopy {
    pub train: ParallelCorpus,
    pub held_out: ParallelCorpus,
    pub dictionary: HashMap<String, String>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl DictionaryCopy {
    pub fn new(types: usize, train_pairs: usize, held_out_pairs: usize, len: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..types).collect();
        perm.shuffle(&mut rng);
        let dictionary: HashMap<String, String> =
            (0..types).map(|i| (format!("s{i}"), format!("t{}", perm[i]))).collect();
        let sample = |n: usize, rng: &mut ChaCha8Rng| {
            let mut src = Vec::with_capacity(n);
            let mut tgt = Vec::with_capacity(n);
            for k in 0..n {
                let l = rng.gen_range(len.0..=len.1);
                // Cycle through types first so every word appears in training.
                let s: Vec<String> = (0..l)
                    .map(|j| {
                        let i = if k * len.0 + j < types { k * len.0 + j } else { rng.gen_range(0..types) };
                        format!("s{i}")
                    })
                    .collect();
                tgt.push(s.iter().map(|w| dictionary[w].clone()).collect());
                src.push(s);
            }
            ParallelCorpus::new(src, tgt).unwrap()
        };
        let train = sample(train_pairs, &mut rng);
        let held_out = sample(held_out_pairs, &mut rng);
        let src_vocab = Vocabulary::build(train.sources(), 1).unwrap();
        let tgt_vocab = Vocabulary::build(train.targets(), 1).unwrap();
        DictionaryCopy {
            train,
            held_out,
            dictionary,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn encoded(&self) -> EncodedCorpus {
        self.train.encode(&self.src_vocab, &self.tgt_vocab)
    }

    pub fn held_out_encoded(&self) -> EncodedCorpus {
        self.held_out.encode(&self.src_vocab, &self.tgt_vocab)
    }
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Brute-force corpus BLEU: n-grams counted by scanning every window
/// against every window, no hashing.
pub fn brute_force_bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> f64 {
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hl, mut rl) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hl += h.len();
        rl += r.len();
        for n in 1..=max_n {
            if h.len() < n {
                continue;
            }
            let hw: Vec<&[String]> = h.windows(n).collect();
            let rw: Vec<&[String]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
            totals[n - 1] += hw.len();
            let mut seen: Vec<&[String]> = Vec::new();
            for g in &hw {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_hyp = hw.iter().filter(|x| *x == g).count();
                let in_ref = rw.iter().filter(|x| *x == g).count();
                matches[n - 1] += in_hyp.min(in_ref);
            }
        }
    }
    if hl == 0 || matches.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..max_n)
        .map(|i| (matches[i] as f64 / totals[i] as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if hl < rl { (1.0 - rl as f64 / hl as f64).exp() } else { 1.0 };
    100.0 * bp * log_p.exp()
}
