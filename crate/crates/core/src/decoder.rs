//! Attention decoder over latent embeddings.
//!
//! The hidden state starts at `tanh(e_root·W + b)`. At each step the GRU
//! consumes the previous token, attends over the latent embeddings with
//! the new state, and the joined `[context; state]` passes through a
//! `tanh` layer before the vocabulary projection.

use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabulary;
use crate::encoder::{bilinear_attention, embed_time_major, BilinearAttn, GruParams, INIT_SCALE};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embedding: ParamId,
    pub gru: GruParams,
    pub attn: BilinearAttn,
    pub combine_w: ParamId,
    pub combine_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub vocab_size: usize,
    pub latent_dim: usize,
}

impl DecoderParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        embedding: ParamId,
        word_dim: usize,
        hidden: usize,
        latent_dim: usize,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            embedding,
            gru: GruParams::new(store, "dec.gru", word_dim, hidden, rng),
            attn: BilinearAttn::new(store, "dec.attn", hidden, latent_dim, rng),
            combine_w: store.uniform(
                "dec.combine.w",
                latent_dim + hidden,
                hidden,
                INIT_SCALE,
                rng,
            ),
            combine_b: store.zeros("dec.combine.b", 1, hidden),
            out_w: store.uniform("dec.out.w", hidden, vocab_size, INIT_SCALE, rng),
            out_b: store.zeros("dec.out.b", 1, vocab_size),
            init_w: store.uniform("dec.init.w", latent_dim, hidden, INIT_SCALE, rng),
            init_b: store.zeros("dec.init.b", 1, hidden),
            vocab_size,
            latent_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim
    }
}

/// `h0 = tanh(e·W + b)` from the root latent embedding.
pub fn init_hidden<T: Real>(cx: &mut Ctx<'_, T>, root: Var, p: &DecoderParams) -> Result<Var> {
    let (r, c) = cx.g.shape(root);
    if c != p.latent_dim {
        return Err(Error::Shape {
            op: "init_hidden",
            lhs: (r, c),
            rhs: (p.latent_dim, p.hidden_dim()),
        });
    }
    let w = cx.p(p.init_w);
    let b = cx.p(p.init_b);
    let x = cx.g.matmul(root, w)?;
    let x = cx.g.add(x, b)?;
    cx.g.tanh(x)
}

/// Attention over the latents and the `tanh` combiner for state `h`.
fn combine<T: Real>(cx: &mut Ctx<'_, T>, h: Var, z_e: &[Var], p: &DecoderParams) -> Result<Var> {
    let att = bilinear_attention(cx, h, z_e, &p.attn)?;
    let joined = cx.g.concat_cols(&[att.context, h])?;
    let w = cx.p(p.combine_w);
    let b = cx.p(p.combine_b);
    let x = cx.g.matmul(joined, w)?;
    let x = cx.g.add(x, b)?;
    cx.g.tanh(x)
}

fn project<T: Real>(cx: &mut Ctx<'_, T>, combined: Var, p: &DecoderParams) -> Result<Var> {
    let w = cx.p(p.out_w);
    let b = cx.p(p.out_b);
    let x = cx.g.matmul(combined, w)?;
    cx.g.add(x, b)
}

fn check_latents<T: Real>(g: &Graph<T>, z_e: &[Var], rows: usize, dim: usize) -> Result<()> {
    if z_e.is_empty() {
        return Err(Error::Empty("latent embeddings"));
    }
    for &z in z_e {
        if g.shape(z) != (rows, dim) {
            return Err(Error::Shape {
                op: "decode_step",
                lhs: g.shape(z),
                rhs: (rows, dim),
            });
        }
    }
    Ok(())
}

/// One decoding step; `x` is the embedded previous token (`B × word`).
/// Returns the logits (`B × V`) and the new state.
pub fn decode_step<T: Real>(
    cx: &mut Ctx<'_, T>,
    h: Var,
    x: Var,
    z_e: &[Var],
    p: &DecoderParams,
) -> Result<(Var, Var)> {
    check_latents(cx.g, z_e, cx.g.shape(h).0, p.latent_dim)?;
    let h2 = crate::encoder::gru_step(cx, x, h, &p.gru)?;
    let c = combine(cx, h2, z_e, p)?;
    let logits = project(cx, c, p)?;
    Ok((logits, h2))
}

/// Per-sequence likelihood split into word positions and the final EOS.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeqScore {
    pub word_nll: f64,
    pub words: usize,
    pub eos_nll: f64,
}

impl SeqScore {
    /// From natural-log probabilities of every target, EOS last.
    pub fn from_log_probs(logp: &[f64]) -> Result<Self> {
        let (eos, words) = logp.split_last().ok_or(Error::Empty("token sequence"))?;
        Ok(Self {
            word_nll: -words.iter().sum::<f64>(),
            words: words.len(),
            eos_nll: -eos,
        })
    }

    /// Mean NLL over word positions; EOS is excluded from both sums.
    pub fn per_word_nll(&self) -> f64 {
        self.word_nll / self.words as f64
    }

    pub fn total_log_prob(&self) -> f64 {
        -(self.word_nll + self.eos_nll)
    }
}

/// Log-probabilities of every target in a teacher-forced batch.
#[derive(Clone, Copy, Debug)]
pub struct TokenScores {
    /// `(steps · B) × 1`, time-major.
    pub logp: Var,
    pub steps: usize,
    pub batch: usize,
}

impl TokenScores {
    /// Mean NLL over all targets including EOS: the training objective.
    pub fn mean_nll<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        let m = g.mean(self.logp)?;
        g.scale(m, -1.0)
    }

    /// Per-sequence scores; the last target of every row is its EOS.
    pub fn per_sequence<T: Real>(&self, g: &Graph<T>) -> Vec<SeqScore> {
        let v = g.value(self.logp).data();
        (0..self.batch)
            .map(|b| {
                let lp: Vec<f64> = (0..self.steps)
                    .map(|t| v[t * self.batch + b].as_f64())
                    .collect();
                SeqScore::from_log_probs(&lp).expect("non-empty")
            })
            .collect()
    }
}

/// Decoder inputs `<s> w1 .. wn` and targets `w1 .. wn </s>` for word-id
/// sequences without EOS.
pub fn teacher_forcing_pairs(words: &[Vec<u32>]) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let inputs = words
        .iter()
        .map(|w| {
            std::iter::once(Vocabulary::START)
                .chain(w.iter().copied())
                .collect()
        })
        .collect();
    let targets = words
        .iter()
        .map(|w| {
            w.iter()
                .copied()
                .chain(std::iter::once(Vocabulary::EOS))
                .collect()
        })
        .collect();
    (inputs, targets)
}

/// Teacher-forced scoring of an equal-length batch of word sequences
/// (no EOS) from initial state `h0`.
pub fn decode_teacher_forced<T: Real>(
    cx: &mut Ctx<'_, T>,
    words: &[Vec<u32>],
    h0: Var,
    z_e: &[Var],
    p: &DecoderParams,
) -> Result<TokenScores> {
    let batch = words.len();
    if batch == 0 {
        return Err(Error::Empty("batch"));
    }
    check_latents(cx.g, z_e, batch, p.latent_dim)?;
    let (inputs, targets) = teacher_forcing_pairs(words);
    let steps = inputs[0].len();
    let x = embed_time_major(cx, p.embedding, &inputs)?;
    let xw = p.gru.project_inputs(cx, x)?;
    let mut h = h0;
    let mut combined = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = cx.g.slice_rows(xw, t * batch, batch)?;
        h = p.gru.step_projected(cx, x_t, h)?;
        combined.push(combine(cx, h, z_e, p)?);
    }
    let all = cx.g.concat_rows(&combined)?;
    let logits = project(cx, all, p)?;
    let logp = cx.g.log_softmax_rows(logits)?;
    let ids: Vec<usize> = (0..steps)
        .flat_map(|t| targets.iter().map(move |s| s[t] as usize))
        .collect();
    let logp = cx.g.pick(logp, &ids)?;
    Ok(TokenScores { logp, steps, batch })
}

/// Scores one word sequence (no EOS) given its latent embeddings, with the
/// decoder state initialized from `z_e[init]`.
pub fn sequence_nll<T: Real>(
    cx: &mut Ctx<'_, T>,
    words: &[u32],
    z_e: &[Var],
    init: usize,
    p: &DecoderParams,
) -> Result<SeqScore> {
    if words.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let root = *z_e.get(init).ok_or(Error::OutOfRange {
        what: "init latent",
        value: init,
        limit: z_e.len(),
    })?;
    let h0 = init_hidden(cx, root, p)?;
    let s = decode_teacher_forced(cx, &[words.to_vec()], h0, z_e, p)?;
    Ok(s.per_sequence(cx.g)[0])
}
