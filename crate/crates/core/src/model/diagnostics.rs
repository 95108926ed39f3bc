use std::fmt::Write as _;

use super::{Model, ModelError, Result};
use crate::data::{Batch, BOS, NUM_SPECIALS};
use crate::tensor::{dot, norm, Graph, Real, Tensor};

/// Lexical-module share of one word's logit.
#[derive(Clone, Debug, PartialEq)]
pub struct LexTerms {
    pub w_norm: f64,
    pub h_norm: f64,
    pub cos: f64,
    pub bias: f64,
    pub logit: f64,
}

/// Attentional state, lexical state (lexical variant only) and attention
/// weights over encoder positions.
pub type StepState<T> = (Vec<T>, Option<Vec<T>>, Vec<T>);

/// Decomposition `logit = ‖W_e‖·‖h̃‖·cos θ + b_e` for one target word,
/// computed from the effective (post-normalization) vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitRow {
    pub id: usize,
    pub w_norm: f64,
    pub h_norm: f64,
    pub cos: f64,
    pub bias: f64,
    pub logit: f64,
    pub lex: Option<LexTerms>,
    /// Logit fed to the softmax (main plus lexical part).
    pub total: f64,
}

impl LogitRow {
    pub fn recomposed(&self) -> f64 {
        self.w_norm * self.h_norm * self.cos + self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LexiconEntry {
    pub src: usize,
    /// `(target id, probability)` by descending probability.
    pub translations: Vec<(usize, f64)>,
    /// Probability mass over the full target vocabulary.
    pub mass: f64,
}

/// `src ⇒ tgt1 (p1) tgt2 (p2) …` with probabilities to three decimals.
pub fn format_lexicon_row<S: AsRef<str>>(src: &str, translations: &[(S, f64)]) -> String {
    let mut out = format!("{src} ⇒");
    for (t, p) in translations {
        let _ = write!(out, " {} ({p:.3})", t.as_ref());
    }
    out
}

fn terms(w: &[f64], h: &[f64], bias: f64) -> (f64, f64, f64, f64) {
    let (wn, hn) = (norm(w), norm(h));
    let d = dot(w, h);
    let cos = if wn > 0.0 && hn > 0.0 { d / (wn * hn) } else { 0.0 };
    (wn, hn, cos, d + bias)
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

impl<T: Real> Model<T> {
    fn effective_state(&self, h: &[T]) -> Vec<f64> {
        let h = to_f64(h);
        if self.config.variant.is_fixnorm() {
            let s = self.config.r() / crate::tensor::guarded_norm(&h);
            h.iter().map(|v| v * s).collect()
        } else {
            h
        }
    }

    /// Per-word logit decomposition for attentional state `h_tilde` (and
    /// lexical state `h_lex` for the lexical variant).
    pub fn inspect_logits(
        &self,
        h_tilde: &[T],
        h_lex: Option<&[T]>,
        candidates: &[usize],
    ) -> Result<Vec<LogitRow>> {
        let l = &self.params.layout;
        let ve = self.config.tgt_vocab_size;
        if self.config.variant.has_lex() != h_lex.is_some() {
            return Err(ModelError::Contract(format!(
                "variant {} {} a lexical state",
                self.config.variant,
                if self.config.variant.has_lex() { "requires" } else { "does not take" }
            )));
        }
        if h_tilde.len() != self.config.hidden_size {
            return Err(ModelError::Contract(format!(
                "state has {} entries, hidden size is {}",
                h_tilde.len(),
                self.config.hidden_size
            )));
        }
        let h = self.effective_state(h_tilde);
        let hl = h_lex.map(|v| self.effective_state(v));
        let bias = self.params.tensors[l.out_bias].data();
        candidates
            .iter()
            .map(|&id| {
                if id >= ve {
                    return Err(ModelError::Contract(format!(
                        "candidate id {id} outside target vocabulary of {ve}"
                    )));
                }
                let w = to_f64(&self.output_row(id));
                let (w_norm, h_norm, cos, logit) = terms(&w, &h, bias[id].as_f64());
                let lex = match (&hl, &l.lex) {
                    (Some(hl), Some(lex)) => {
                        let row = to_f64(self.params.tensors[lex.out].row(id));
                        let row = self.effective_state_f64(&row);
                        let b = self.params.tensors[lex.bias].data()[id].as_f64();
                        let (w_norm, h_norm, cos, logit) = terms(&row, hl, b);
                        Some(LexTerms {
                            w_norm,
                            h_norm,
                            cos,
                            bias: b,
                            logit,
                        })
                    }
                    _ => None,
                };
                let total = logit + lex.as_ref().map_or(0.0, |t| t.logit);
                Ok(LogitRow {
                    id,
                    w_norm,
                    h_norm,
                    cos,
                    bias: bias[id].as_f64(),
                    logit,
                    lex,
                    total,
                })
            })
            .collect()
    }

    fn effective_state_f64(&self, v: &[f64]) -> Vec<f64> {
        let s = self.config.r() / crate::tensor::guarded_norm(v);
        v.iter().map(|x| x * s).collect()
    }

    /// Lexical-module distributions `[n × V_e]` for source ids fed with
    /// one-hot attention.
    pub fn lexicon_probs(&self, src_ids: &[usize]) -> Result<Tensor<T>> {
        let lex = self.params.layout.lex.clone().ok_or_else(|| {
            ModelError::Contract(format!(
                "lexicon extraction needs variant fixnorm_lex, model is {}",
                self.config.variant
            ))
        })?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let emb = g.lookup(bound.vars[self.params.layout.src_embed], src_ids)?;
        let f = g.tanh(emb)?;
        let mut z = g.matmul_bt(f, bound.vars[lex.hidden])?;
        if let Some(hb) = lex.hidden_bias {
            z = g.add_bias(z, bound.vars[hb])?;
        }
        let t = g.tanh(z)?;
        let h = g.add(t, f)?;
        let hn = g.normalize_rows(h, T::lit(self.config.r()))?;
        let rows = bound.lex_rows.expect("lexical variant binds lexical rows");
        let logits = g.matmul_bt(hn, rows)?;
        let logits = g.add_bias(logits, bound.vars[lex.bias])?;
        let p = g.softmax_rows(logits)?;
        Ok(g.value(p).clone())
    }

    /// Top-`k` lexical translations of every non-special source type.
    pub fn extract_lexicon(&self, top_k: usize) -> Result<Vec<LexiconEntry>> {
        let vf = self.config.src_vocab_size;
        let ids: Vec<usize> = (NUM_SPECIALS..vf).collect();
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(256) {
            let probs = self.lexicon_probs(chunk)?;
            for (i, &src) in chunk.iter().enumerate() {
                let row = probs.row(i);
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                out.push(LexiconEntry {
                    src,
                    translations: order
                        .into_iter()
                        .take(top_k)
                        .map(|e| (e, row[e].as_f64()))
                        .collect(),
                    mass: row.iter().map(|p| p.as_f64()).sum(),
                });
            }
        }
        Ok(out)
    }

    /// Decoder state after forcing `prefix`: the attentional state, the
    /// lexical state and the attention weights used to predict the next
    /// word. `src` is in original order.
    pub fn step_state(&self, src: &[usize], prefix: &[usize]) -> Result<StepState<T>> {
        if src.is_empty() {
            return Err(ModelError::Contract("empty source sentence".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let batch = Batch::source_only(src);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let enc = self.encode(&mut g, &bound, &batch, false, &mut rng)?;
        let mut state = self.init_decoder(&mut g, &enc);
        let mut prev = BOS;
        let mut last = None;
        for &next in prefix.iter().chain(std::iter::once(&BOS)) {
            let (out, st) = self.decoder_step(&mut g, &bound, &enc, &state, &[prev], false, &mut rng)?;
            state = st;
            last = Some(out);
            prev = next;
        }
        let out = last.expect("at least one step");
        Ok((
            g.value(out.h_tilde).data().to_vec(),
            out.h_lex.map(|v| g.value(v).data().to_vec()),
            g.value(out.attention).data().to_vec(),
        ))
    }
}
