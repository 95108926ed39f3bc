use rand::seq::SliceRandom;
use rand::Rng;

use super::{BOS, EOS, PAD};

/// A sentence pair as ids, both sides in original order without BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub pairs: Vec<EncodedPair>,
}

impl EncodedCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.tgt.len() + 1).sum()
    }
}

/// Padded minibatch. Matrices are row-major `[size × len]`; the source is
/// reversed and right-padded, targets are BOS-prefixed (`tgt_in`) and
/// EOS-suffixed (`tgt_out`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src_ids: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_mask: Vec<bool>,
    pub src_lengths: Vec<usize>,
    pub tgt_lengths: Vec<usize>,
    /// Position of each row in the originating corpus.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair], indices: Vec<usize>) -> Batch {
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.src.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap_or(1);
        let mut src_ids = vec![PAD; size * src_len];
        let mut src_mask = vec![false; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        let mut tgt_mask = vec![false; size * tgt_len];
        for (b, p) in pairs.iter().enumerate() {
            for (j, &id) in p.src.iter().rev().enumerate() {
                src_ids[b * src_len + j] = id;
                src_mask[b * src_len + j] = true;
            }
            let row = b * tgt_len;
            tgt_in[row] = BOS;
            for (j, &id) in p.tgt.iter().enumerate() {
                tgt_in[row + j + 1] = id;
                tgt_out[row + j] = id;
            }
            tgt_out[row + p.tgt.len()] = EOS;
            for m in &mut tgt_mask[row..row + p.tgt.len() + 1] {
                *m = true;
            }
        }
        Batch {
            size,
            src_len,
            tgt_len,
            src_ids,
            src_mask,
            tgt_in,
            tgt_out,
            tgt_mask,
            src_lengths: pairs.iter().map(|p| p.src.len()).collect(),
            tgt_lengths: pairs.iter().map(|p| p.tgt.len() + 1).collect(),
            indices,
        }
    }

    /// Single-sentence source-only batch for decoding.
    pub fn source_only(src: &[usize]) -> Batch {
        let pair = EncodedPair {
            src: src.to_vec(),
            tgt: vec![],
        };
        Batch::from_pairs(&[&pair], vec![0])
    }

    /// Number of target positions that contribute to the loss.
    pub fn num_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }

    pub fn src_column(&self, s: usize) -> Vec<usize> {
        (0..self.size).map(|b| self.src_ids[b * self.src_len + s]).collect()
    }

    pub fn tgt_in_column(&self, t: usize) -> Vec<usize> {
        (0..self.size).map(|b| self.tgt_in[b * self.tgt_len + t]).collect()
    }

    pub fn tgt_out_column(&self, t: usize) -> Vec<usize> {
        (0..self.size).map(|b| self.tgt_out[b * self.tgt_len + t]).collect()
    }

    pub fn tgt_mask_column(&self, t: usize) -> Vec<bool> {
        (0..self.size).map(|b| self.tgt_mask[b * self.tgt_len + t]).collect()
    }
}

/// Sorts pairs by target length (then source length, then position),
/// slices them into batches of `batch_size`, and shuffles the batch order
/// when an rng is given.
pub fn make_batches<R: Rng + ?Sized>(
    corpus: &EncodedCorpus,
    batch_size: usize,
    rng: Option<&mut R>,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| (corpus.pairs[i].tgt.len(), corpus.pairs[i].src.len(), i));
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|idx| {
            let pairs: Vec<&EncodedPair> = idx.iter().map(|&i| &corpus.pairs[i]).collect();
            Batch::from_pairs(&pairs, idx.to_vec())
        })
        .collect();
    if let Some(rng) = rng {
        batches.shuffle(rng);
    }
    batches
}
