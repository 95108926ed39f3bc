use rand::Rng;

use super::{Model, ModelError, Result};
use crate::data::Batch;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Parameters placed on a graph, plus the derived tables every step needs.
#[derive(Clone, Debug)]
pub struct Bound {
    /// One var per entry of [`super::ModelParams::tensors`].
    pub vars: Vec<Var>,
    /// Target table used for input lookup (effective rows when fixnorm).
    pub tgt_lookup: Var,
    /// Output projection rows (effective rows when fixnorm).
    pub out_rows: Var,
    /// Effective lexical output rows.
    pub lex_rows: Option<Var>,
}

/// Encoder results for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub batch: usize,
    pub src_len: usize,
    /// Top-layer states `[B×S×d]`, reversed source order.
    pub states: Var,
    /// Raw source embeddings `[B×S×d]`, kept for the lexical module.
    pub src_embed: Option<Var>,
    pub mask: Vec<bool>,
    pub final_h: Vec<Var>,
    pub final_c: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    /// Previous attentional state; zeros before the first step.
    pub feed: Var,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Attentional hidden state `[B×d]`, pre-normalization.
    pub h_tilde: Var,
    /// Attention weights `[B×S]`.
    pub attention: Var,
    pub context: Var,
    /// Lexical hidden state `[B×d]` when the variant has one.
    pub h_lex: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// Mean negative log-likelihood over non-PAD target tokens.
    pub loss: Var,
    pub num_tokens: usize,
    /// Logits `[B×V_e]` per target step.
    pub logits: Vec<Var>,
    /// Output-layer states `[B×d]` per target step (see `output_state`).
    pub states: Vec<Var>,
    /// Attention `[B×S]` per target step.
    pub attention: Vec<Var>,
}

fn lstm_cell<T: Real>(
    g: &mut Graph<T>,
    (w, b): (Var, Var),
    x: Var,
    h: Var,
    c: Var,
    d: usize,
) -> Result<(Var, Var)> {
    let xh = g.concat_cols(&[x, h])?;
    let z = g.matmul_bt(xh, w)?;
    let z = g.add_bias(z, b)?;
    let i = g.slice_cols(z, 0, d)?;
    let i = g.sigmoid(i)?;
    let f = g.slice_cols(z, d, d)?;
    let f = g.sigmoid(f)?;
    let u = g.slice_cols(z, 2 * d, d)?;
    let u = g.tanh(u)?;
    let o = g.slice_cols(z, 3 * d, d)?;
    let o = g.sigmoid(o)?;
    let fc = g.mul(f, c)?;
    let iu = g.mul(i, u)?;
    let c_new = g.add(fc, iu)?;
    let tc = g.tanh(c_new)?;
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

impl<T: Real> Model<T> {
    fn r_lit(&self) -> T {
        T::lit(self.config.r())
    }

    /// Places all parameters on `g`. With `trainable` false they enter as
    /// constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let vars: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let l = &self.params.layout;
        let fixnorm = self.config.variant.is_fixnorm();
        let tgt = vars[l.tgt_embed];
        let tgt_lookup = if fixnorm {
            g.normalize_rows(tgt, self.r_lit())?
        } else {
            tgt
        };
        let out_rows = match l.out_proj {
            Some(i) => vars[i],
            None => tgt_lookup,
        };
        let lex_rows = match &l.lex {
            Some(lex) => Some(g.normalize_rows(vars[lex.out], self.r_lit())?),
            None => None,
        };
        Ok(Bound {
            vars,
            tgt_lookup,
            out_rows,
            lex_rows,
        })
    }

    fn zero_state(&self, g: &mut Graph<T>, rows: usize) -> Var {
        g.constant(Tensor::zeros(&[rows, self.config.hidden_size]))
    }

    /// Runs the stacked encoder over the (reversed, right-padded) source.
    /// Padded steps carry the previous state forward, so final states and
    /// attention are unaffected by padding.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &Batch,
        training: bool,
        rng: &mut R,
    ) -> Result<Encoded> {
        if batch.src_len == 0 || batch.src_lengths.contains(&0) {
            return Err(ModelError::Contract("cannot encode an empty source".into()));
        }
        let (b, d, p) = (batch.size, self.config.hidden_size, self.config.dropout);
        let l = &self.params.layout;
        let layers = self.config.num_layers;
        let mut h: Vec<Var> = (0..layers).map(|_| self.zero_state(g, b)).collect();
        let mut c = h.clone();
        let mut tops = Vec::with_capacity(batch.src_len);
        let mut embeds = Vec::with_capacity(batch.src_len);
        for s in 0..batch.src_len {
            let ids = batch.src_column(s);
            let mask: Vec<bool> = (0..b).map(|i| batch.src_mask[i * batch.src_len + s]).collect();
            let emb = g.lookup(bound.vars[l.src_embed], &ids)?;
            embeds.push(emb);
            let mut x = g.dropout(emb, p, training, rng)?;
            for layer in 0..layers {
                let (wi, bi) = l.encoder[layer];
                let (hn, cn) =
                    lstm_cell(g, (bound.vars[wi], bound.vars[bi]), x, h[layer], c[layer], d)?;
                h[layer] = g.select_rows(&mask, hn, h[layer])?;
                c[layer] = g.select_rows(&mask, cn, c[layer])?;
                x = g.dropout(h[layer], p, training, rng)?;
            }
            tops.push(h[layers - 1]);
        }
        let states = g.stack_steps(&tops)?;
        let src_embed = if self.config.variant.has_lex() {
            Some(g.stack_steps(&embeds)?)
        } else {
            None
        };
        Ok(Encoded {
            batch: b,
            src_len: batch.src_len,
            states,
            src_embed,
            mask: batch.src_mask.clone(),
            final_h: h,
            final_c: c,
        })
    }

    /// Decoder starts from the encoder's final states with a zero input feed.
    pub fn init_decoder(&self, g: &mut Graph<T>, enc: &Encoded) -> DecoderState {
        DecoderState {
            h: enc.final_h.clone(),
            c: enc.final_c.clone(),
            feed: self.zero_state(g, enc.batch),
        }
    }

    /// Masked general attention: `a = softmax(h W_a H̄ᵀ)`, `c = a H̄`.
    pub fn attend(&self, g: &mut Graph<T>, bound: &Bound, h: Var, enc: &Encoded) -> Result<(Var, Var)> {
        let q = g.matmul(h, bound.vars[self.params.layout.attn_w])?;
        let scores = g.batch_scores(q, enc.states)?;
        let a = g.masked_softmax_rows(scores, Some(&enc.mask))?;
        let ctx = g.batch_weighted_sum(a, enc.states)?;
        Ok((a, ctx))
    }

    /// `f = tanh(Σ_s a_s f_s)`, `h = tanh(W f) + f` over raw source embeddings.
    pub fn lex_step(&self, g: &mut Graph<T>, bound: &Bound, a: Var, src_embed: Var) -> Result<Var> {
        let lex = self.params.layout.lex.as_ref().ok_or_else(|| {
            ModelError::Contract(format!("variant {} has no lexical module", self.config.variant))
        })?;
        let avg = g.batch_weighted_sum(a, src_embed)?;
        let f = g.tanh(avg)?;
        let mut z = g.matmul_bt(f, bound.vars[lex.hidden])?;
        if let Some(hb) = lex.hidden_bias {
            z = g.add_bias(z, bound.vars[hb])?;
        }
        let t = g.tanh(z)?;
        Ok(g.add(t, f)?)
    }

    /// One decoder step for every row of the batch given the previous
    /// target ids. Returns the step output and the next state.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        enc: &Encoded,
        state: &DecoderState,
        prev: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<(StepOutput, DecoderState)> {
        let (d, p) = (self.config.hidden_size, self.config.dropout);
        let l = &self.params.layout;
        let emb = g.lookup(bound.tgt_lookup, prev)?;
        let emb = g.dropout(emb, p, training, rng)?;
        let mut x = g.concat_cols(&[emb, state.feed])?;
        let mut h = state.h.clone();
        let mut c = state.c.clone();
        for layer in 0..self.config.num_layers {
            let (wi, bi) = l.decoder[layer];
            let (hn, cn) = lstm_cell(g, (bound.vars[wi], bound.vars[bi]), x, h[layer], c[layer], d)?;
            h[layer] = hn;
            c[layer] = cn;
            x = g.dropout(hn, p, training, rng)?;
        }
        let top = x;
        let (a, ctx) = self.attend(g, bound, top, enc)?;
        let cat = g.concat_cols(&[ctx, top])?;
        let z = g.matmul_bt(cat, bound.vars[l.attn_combine])?;
        let h_tilde = g.tanh(z)?;
        let h_lex = match enc.src_embed {
            Some(src) => Some(self.lex_step(g, bound, a, src)?),
            None => None,
        };
        Ok((
            StepOutput {
                h_tilde,
                attention: a,
                context: ctx,
                h_lex,
            },
            DecoderState {
                h,
                c,
                feed: h_tilde,
            },
        ))
    }

    /// Output-layer logits `[B×V_e]` for the configured variant.
    pub fn output_logits(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        h_tilde: Var,
        h_lex: Option<Var>,
    ) -> Result<Var> {
        let h = self.output_state(g, h_tilde)?;
        self.logits_from_state(g, bound, h, h_lex)
    }

    /// The state the output layer sees: `h_tilde` rescaled to norm `r` for
    /// fixnorm variants, unchanged otherwise.
    pub fn output_state(&self, g: &mut Graph<T>, h_tilde: Var) -> Result<Var> {
        if self.config.variant.is_fixnorm() {
            Ok(g.normalize_rows(h_tilde, self.r_lit())?)
        } else {
            Ok(h_tilde)
        }
    }

    fn logits_from_state(&self, g: &mut Graph<T>, bound: &Bound, h: Var, h_lex: Option<Var>) -> Result<Var> {
        let l = &self.params.layout;
        let variant = self.config.variant;
        if variant.has_lex() != h_lex.is_some() {
            return Err(ModelError::Contract(format!(
                "variant {variant} {} a lexical state",
                if variant.has_lex() { "requires" } else { "does not take" }
            )));
        }
        let z = g.matmul_bt(h, bound.out_rows)?;
        let mut logits = g.add_bias(z, bound.vars[l.out_bias])?;
        if let (Some(hl), Some(lex), Some(rows)) = (h_lex, &l.lex, bound.lex_rows) {
            let hn = g.normalize_rows(hl, self.r_lit())?;
            let z = g.matmul_bt(hn, rows)?;
            let z = g.add_bias(z, bound.vars[lex.bias])?;
            logits = g.add(logits, z)?;
        }
        Ok(logits)
    }

    /// Teacher-forced pass over a batch. The loss is the mean NLL of the
    /// gold targets over non-PAD positions.
    pub fn forward_teacher_forced<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &Batch,
        training: bool,
        rng: &mut R,
    ) -> Result<TeacherForced> {
        let n = batch.num_tokens();
        if n == 0 {
            return Err(ModelError::Contract("batch has no target tokens".into()));
        }
        let enc = self.encode(g, bound, batch, training, rng)?;
        let mut state = self.init_decoder(g, &enc);
        let w = T::one() / T::lit(n as f64);
        let mut total: Option<Var> = None;
        let mut logits = Vec::with_capacity(batch.tgt_len);
        let mut attention = Vec::with_capacity(batch.tgt_len);
        let mut states = Vec::with_capacity(batch.tgt_len);
        for t in 0..batch.tgt_len {
            let (out, next) =
                self.decoder_step(g, bound, &enc, &state, &batch.tgt_in_column(t), training, rng)?;
            state = next;
            let h = self.output_state(g, out.h_tilde)?;
            let z = self.logits_from_state(g, bound, h, out.h_lex)?;
            let logp = g.log_softmax_rows(z)?;
            let weights: Vec<T> = batch
                .tgt_mask_column(t)
                .into_iter()
                .map(|m| if m { w } else { T::zero() })
                .collect();
            let nll = g.nll_rows(logp, &batch.tgt_out_column(t), &weights)?;
            total = Some(match total {
                Some(acc) => g.add(acc, nll)?,
                None => nll,
            });
            logits.push(z);
            states.push(h);
            attention.push(out.attention);
        }
        Ok(TeacherForced {
            loss: total.expect("tgt_len >= 1"),
            num_tokens: n,
            logits,
            states,
            attention,
        })
    }

    /// Mean per-token NLL of a batch in evaluation mode.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let tf = self.forward_teacher_forced(&mut g, &bound, batch, false, &mut rng)?;
        Ok(g.value(tf.loss).item().as_f64())
    }

    /// Output logits for explicit state vectors, outside any batch.
    pub fn logits_for(&self, h_tilde: &[T], h_lex: Option<&[T]>) -> Result<Vec<T>> {
        let d = self.config.hidden_size;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let h = g.constant(Tensor::new(vec![1, d], h_tilde.to_vec())?);
        let hl = match h_lex {
            Some(v) => Some(g.constant(Tensor::new(vec![1, d], v.to_vec())?)),
            None => None,
        };
        let z = self.output_logits(&mut g, &bound, h, hl)?;
        Ok(g.value(z).data().to_vec())
    }
}
