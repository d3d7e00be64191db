//! The four model variants behind one interface.
//!
//! `haqae` and `nohier` are autoencoders over a quantized latent chain.
//! `rnnlm` is a stacked GRU language model and `rnnlm_role` adds a learned
//! embedding of each input token's slot role.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{HaqaeConfig, Variant};
use crate::decoder::{
    decode_step, decode_teacher_forced, init_hidden, teacher_forcing_pairs, DecoderParams,
    SeqScore, TokenScores,
};
use crate::encoder::{embed_time_major, encode_sequence, EncoderParams, GruParams, INIT_SCALE};
use crate::error::{Error, Result};
use crate::generate::Autoregressive;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::vq::{commit_loss, infer_chain_with, reconstruct_loss, ChainAssignment, LatentChain};

/// Slot roles fed to `rnnlm_role`, indexed by role id.
pub const ROLES: [&str; 5] = ["verb", "subject", "object", "preposition", "separator"];

/// Role id of the token at position `pos` of the decoder input
/// `<s> w1 w2 ...`: the start token counts as a separator.
pub fn role_of_position(pos: usize) -> usize {
    if pos == 0 {
        4
    } else {
        (pos - 1) % 5
    }
}

#[derive(Clone, Debug)]
pub struct LatentArch {
    pub encoder: EncoderParams,
    pub chain: LatentChain,
    pub decoder: DecoderParams,
    /// Latent whose embedding initializes the decoder state.
    pub init_latent: usize,
}

#[derive(Clone, Debug)]
pub struct LmArch {
    pub embedding: ParamId,
    pub roles: Option<ParamId>,
    pub layers: Vec<GruParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Arch {
    Latent(LatentArch),
    Lm(LmArch),
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: HaqaeConfig,
    pub vocab_size: usize,
    pub params: ParamStore<T>,
    pub arch: Arch,
}

/// Loss components of one batch.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    /// Mean NLL over all targets, EOS included.
    pub nll: Var,
    pub recon: Option<Var>,
    pub commit: Option<Var>,
    pub scores: TokenScores,
    pub assignment: Option<ChainAssignment>,
}

/// Aggregate over a corpus, in corpus order.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: Vec<SeqScore>,
    /// Sequence-weighted means.
    pub recon: f64,
    pub commit: f64,
    /// Per-latent code histogram.
    pub usage: Vec<Vec<usize>>,
}

impl Evaluation {
    /// Token-weighted per-word NLL with EOS excluded.
    pub fn word_nll(&self) -> f64 {
        let nll: f64 = self.scores.iter().map(|s| s.word_nll).sum();
        let words: usize = self.scores.iter().map(|s| s.words).sum();
        nll / words as f64
    }
}

/// Indices grouped into equal-length batches of at most `batch_size`,
/// shortest length first, corpus order within a length.
pub fn length_buckets(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in lengths.iter().enumerate() {
        by_len.entry(n).or_default().push(i);
    }
    by_len
        .into_values()
        .flat_map(|ix| {
            ix.chunks(batch_size.max(1))
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn build_variant<T: Real>(config: &HaqaeConfig, vocab_size: usize) -> Result<Model<T>> {
    config.validate()?;
    if vocab_size <= 6 {
        return Err(Error::Config(format!(
            "vocabulary of {vocab_size} has no content tokens"
        )));
    }
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut store = ParamStore::new();
    let arch = match c.variant {
        Variant::Haqae | Variant::Nohier => {
            let enc_emb = store.uniform(
                "enc.embedding",
                vocab_size,
                c.word_dim,
                INIT_SCALE,
                &mut rng,
            );
            let dec_emb = if c.tie_embeddings {
                enc_emb
            } else {
                store.uniform(
                    "dec.embedding",
                    vocab_size,
                    c.word_dim,
                    INIT_SCALE,
                    &mut rng,
                )
            };
            let encoder =
                EncoderParams::new(&mut store, enc_emb, c.word_dim, c.enc_hidden, &mut rng);
            let chain = LatentChain::new(
                &mut store,
                c.latents,
                c.codes,
                c.latent_dim,
                encoder.output_dim(),
                c.variant == Variant::Haqae,
                c.project_queries,
                &mut rng,
            )?;
            let decoder = DecoderParams::new(
                &mut store,
                dec_emb,
                c.word_dim,
                c.dec_hidden,
                c.latent_dim,
                vocab_size,
                &mut rng,
            );
            Arch::Latent(LatentArch {
                encoder,
                chain,
                decoder,
                init_latent: if c.variant == Variant::Nohier {
                    c.init_latent
                } else {
                    0
                },
            })
        }
        Variant::Rnnlm | Variant::RnnlmRole => {
            let embedding =
                store.uniform("lm.embedding", vocab_size, c.word_dim, INIT_SCALE, &mut rng);
            let roles = (c.variant == Variant::RnnlmRole)
                .then(|| store.uniform("lm.roles", ROLES.len(), c.role_dim, INIT_SCALE, &mut rng));
            let in_dim = c.word_dim + if roles.is_some() { c.role_dim } else { 0 };
            let layers = (0..c.lm_layers)
                .map(|l| {
                    let input = if l == 0 { in_dim } else { c.dec_hidden };
                    GruParams::new(
                        &mut store,
                        &format!("lm.gru{l}"),
                        input,
                        c.dec_hidden,
                        &mut rng,
                    )
                })
                .collect();
            Arch::Lm(LmArch {
                embedding,
                roles,
                layers,
                out_w: store.uniform("lm.out.w", c.dec_hidden, vocab_size, INIT_SCALE, &mut rng),
                out_b: store.zeros("lm.out.b", 1, vocab_size),
                dropout: c.dropout,
            })
        }
    };
    Ok(Model {
        config: c.clone(),
        vocab_size,
        params: store,
        arch,
    })
}

impl<T: Real> Model<T> {
    pub fn latent(&self) -> Option<&LatentArch> {
        match &self.arch {
            Arch::Latent(a) => Some(a),
            Arch::Lm(_) => None,
        }
    }

    pub fn lm(&self) -> Option<&LmArch> {
        match &self.arch {
            Arch::Lm(a) => Some(a),
            Arch::Latent(_) => None,
        }
    }

    /// Parameter count per top-level group (`enc`, `latent0`, `dec`, ...).
    pub fn census(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let group = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(group).or_insert(0) += t.len();
        }
        out
    }

    /// Input width of the first recurrent layer.
    pub fn input_dim(&self) -> usize {
        match &self.arch {
            Arch::Latent(a) => a.decoder.gru.input_dim,
            Arch::Lm(a) => a.layers[0].input_dim,
        }
    }

    /// Builds the loss graph for an equal-length batch of word-id sequences
    /// (no EOS).
    pub fn loss(&self, cx: &mut Ctx<'_, T>, words: &[Vec<u32>]) -> Result<LossParts> {
        self.loss_with(cx, words, None)
    }

    /// Like [`loss`](Self::loss) with optional forced codes per latent.
    pub fn loss_with(
        &self,
        cx: &mut Ctx<'_, T>,
        words: &[Vec<u32>],
        forced: Option<&[Option<usize>]>,
    ) -> Result<LossParts> {
        if words.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if let Some(bad) = words
            .iter()
            .flatten()
            .find(|&&t| t as usize >= self.vocab_size)
        {
            return Err(Error::OutOfRange {
                what: "token id",
                value: *bad as usize,
                limit: self.vocab_size,
            });
        }
        match &self.arch {
            Arch::Latent(a) => {
                let enc = encode_sequence(cx, words, &a.encoder)?;
                let none = vec![None; a.chain.len()];
                let assignment = infer_chain_with(cx, &enc, &a.chain, forced.unwrap_or(&none))?;
                let z_e = assignment.decoder_inputs();
                let h0 = init_hidden(cx, z_e[a.init_latent], &a.decoder)?;
                let scores = decode_teacher_forced(cx, words, h0, &z_e, &a.decoder)?;
                let nll = scores.mean_nll(cx.g)?;
                let recon = reconstruct_loss(cx.g, &assignment)?;
                let commit = commit_loss(cx.g, &assignment, self.config.beta)?;
                let total = cx.g.add_n(&[nll, recon, commit])?;
                Ok(LossParts {
                    total,
                    nll,
                    recon: Some(recon),
                    commit: Some(commit),
                    scores,
                    assignment: Some(assignment),
                })
            }
            Arch::Lm(a) => {
                let scores = self.lm_forward(cx, a, words)?;
                let nll = scores.mean_nll(cx.g)?;
                Ok(LossParts {
                    total: nll,
                    nll,
                    recon: None,
                    commit: None,
                    scores,
                    assignment: None,
                })
            }
        }
    }

    fn lm_forward(
        &self,
        cx: &mut Ctx<'_, T>,
        a: &LmArch,
        words: &[Vec<u32>],
    ) -> Result<TokenScores> {
        let batch = words.len();
        let (inputs, targets) = teacher_forcing_pairs(words);
        let steps = inputs[0].len();
        let mut x = embed_time_major(cx, a.embedding, &inputs)?;
        if let Some(roles) = a.roles {
            let ids: Vec<usize> = (0..steps)
                .flat_map(|t| std::iter::repeat_n(role_of_position(t), batch))
                .collect();
            let table = cx.p(roles);
            let r = cx.g.embedding_lookup(table, &ids)?;
            x = cx.g.concat_cols(&[x, r])?;
        }
        x = cx.dropout(x, a.dropout)?;
        for layer in &a.layers {
            let xw = layer.project_inputs(cx, x)?;
            let mut h = cx.g.constant(Tensor::zeros(batch, layer.hidden_dim));
            let mut states = Vec::with_capacity(steps);
            for t in 0..steps {
                let x_t = cx.g.slice_rows(xw, t * batch, batch)?;
                h = layer.step_projected(cx, x_t, h)?;
                states.push(h);
            }
            x = cx.g.concat_rows(&states)?;
        }
        x = cx.dropout(x, a.dropout)?;
        let w = cx.p(a.out_w);
        let b = cx.p(a.out_b);
        let logits = cx.g.matmul(x, w)?;
        let logits = cx.g.add(logits, b)?;
        let logp = cx.g.log_softmax_rows(logits)?;
        let ids: Vec<usize> = (0..steps)
            .flat_map(|t| targets.iter().map(move |s| s[t] as usize))
            .collect();
        let logp = cx.g.pick(logp, &ids)?;
        Ok(TokenScores { logp, steps, batch })
    }

    /// Scores every sequence without gradients, batching equal lengths.
    pub fn evaluate(&self, seqs: &[Vec<u32>], batch_size: usize) -> Result<Evaluation> {
        if seqs.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let mut scores = vec![None; seqs.len()];
        let (mut recon, mut commit) = (0.0, 0.0);
        let codes = self.latent().map_or(0, |a| a.chain.codes());
        let m = self.latent().map_or(0, |a| a.chain.len());
        let mut usage = vec![vec![0; codes]; m];
        for ix in length_buckets(&lengths, batch_size) {
            let batch: Vec<Vec<u32>> = ix.iter().map(|&i| seqs[i].clone()).collect();
            let mut g = Graph::new();
            let mut cx = Ctx::inference(&mut g, &self.params);
            let parts = self.loss(&mut cx, &batch)?;
            let w = ix.len() as f64;
            if let Some(r) = parts.recon {
                recon += cx.g.value(r).item().as_f64() * w;
            }
            if let Some(c) = parts.commit {
                commit += cx.g.value(c).item().as_f64() * w;
            }
            if let Some(a) = &parts.assignment {
                for (u, l) in usage.iter_mut().zip(&a.latents) {
                    for &k in &l.codes {
                        u[k] += 1;
                    }
                }
            }
            for (s, &i) in parts.scores.per_sequence(cx.g).into_iter().zip(&ix) {
                scores[i] = Some(s);
            }
        }
        let n = seqs.len() as f64;
        Ok(Evaluation {
            scores: scores
                .into_iter()
                .map(|s| s.expect("every index scored"))
                .collect(),
            recon: recon / n,
            commit: commit / n,
            usage,
        })
    }

    /// Overwrites every codebook with encoder queries of training
    /// sequences, root first so that each child's queries are computed
    /// from its parent's new codes. `K` distinct sequences are drawn when
    /// the set is large enough. No-op for the language-model variants.
    pub fn init_codebooks_from_data(
        &mut self,
        seqs: &[Vec<u32>],
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let Arch::Latent(a) = &self.arch else {
            return Ok(());
        };
        if seqs.is_empty() {
            return Err(Error::Empty("codebook initialization set"));
        }
        let k = a.chain.codes();
        let picks: Vec<usize> = if seqs.len() >= k {
            index::sample(rng, seqs.len(), k).into_vec()
        } else {
            (0..k).map(|_| rng.gen_range(0..seqs.len())).collect()
        };
        let lengths: Vec<usize> = picks.iter().map(|&i| seqs[i].len()).collect();
        let none = vec![None; a.chain.len()];
        for (i, lat) in a.chain.latents.iter().enumerate() {
            let mut rows = vec![Vec::new(); k];
            for ix in length_buckets(&lengths, usize::MAX) {
                let batch: Vec<Vec<u32>> = ix.iter().map(|&j| seqs[picks[j]].clone()).collect();
                let mut g = Graph::new();
                let mut cx = Ctx::inference(&mut g, &self.params);
                let enc = encode_sequence(&mut cx, &batch, &a.encoder)?;
                let asg = infer_chain_with(&mut cx, &enc, &a.chain, &none)?;
                let q = cx.g.value(asg.latents[i].query);
                for (r, &j) in ix.iter().enumerate() {
                    rows[j] = q.row_slice(r).to_vec();
                }
            }
            let table = self.params.get_mut(lat.codebook.table);
            for (j, row) in rows.iter().enumerate() {
                table.data_mut()[j * row.len()..(j + 1) * row.len()].copy_from_slice(row);
            }
        }
        Ok(())
    }

    /// Inferred codes of one word sequence, root first. Empty for the
    /// language-model variants.
    pub fn infer_codes(&self, words: &[u32]) -> Result<Vec<usize>> {
        let Some(a) = self.latent() else {
            return Ok(Vec::new());
        };
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &self.params);
        let enc = encode_sequence(&mut cx, &[words.to_vec()], &a.encoder)?;
        let none = vec![None; a.chain.len()];
        Ok(infer_chain_with(&mut cx, &enc, &a.chain, &none)?.codes(0))
    }

    /// Codes after forcing `latent` to `value` and re-inferring its
    /// descendants from the new parent.
    pub fn infer_codes_forced(
        &self,
        words: &[u32],
        latent: usize,
        value: usize,
    ) -> Result<Vec<usize>> {
        let a = self
            .latent()
            .ok_or_else(|| Error::Invalid("model has no latents".into()))?;
        self.check_code(latent, value)?;
        let mut forced = vec![None; a.chain.len()];
        forced[latent] = Some(value);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &self.params);
        let enc = encode_sequence(&mut cx, &[words.to_vec()], &a.encoder)?;
        Ok(infer_chain_with(&mut cx, &enc, &a.chain, &forced)?.codes(0))
    }

    pub fn check_code(&self, latent: usize, value: usize) -> Result<()> {
        let a = self
            .latent()
            .ok_or_else(|| Error::Invalid("model has no latents".into()))?;
        if latent >= a.chain.len() {
            return Err(Error::OutOfRange {
                what: "latent index",
                value: latent,
                limit: a.chain.len(),
            });
        }
        if value >= a.chain.codes() {
            return Err(Error::OutOfRange {
                what: "latent value",
                value,
                limit: a.chain.codes(),
            });
        }
        Ok(())
    }

    /// A step-by-step decoder conditioned on the given latent codes.
    /// Language-model variants take no codes.
    pub fn stepper(&self, codes: &[usize]) -> Result<Stepper<'_, T>> {
        let z_e = match &self.arch {
            Arch::Latent(a) => {
                if codes.len() != a.chain.len() {
                    return Err(Error::Invalid(format!(
                        "{} codes for {} latents",
                        codes.len(),
                        a.chain.len()
                    )));
                }
                codes
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        self.check_code(i, k)?;
                        let cb = self.params.get(a.chain.latents[i].codebook.table);
                        Ok(Tensor::row(cb.row_slice(k).to_vec()))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Arch::Lm(_) => {
                if !codes.is_empty() {
                    return Err(Error::Invalid(
                        "language models take no latent codes".into(),
                    ));
                }
                Vec::new()
            }
        };
        Ok(Stepper { model: self, z_e })
    }

    /// Stepper conditioned on the codes inferred from `words`.
    pub fn stepper_for(&self, words: &[u32]) -> Result<Stepper<'_, T>> {
        let codes = self.infer_codes(words)?;
        self.stepper(&codes)
    }
}

/// Incremental decoding state: one hidden row per recurrent layer and the
/// number of tokens consumed.
#[derive(Clone, Debug)]
pub struct StepState<T> {
    pub hidden: Vec<Tensor<T>>,
    pub pos: usize,
}

pub struct Stepper<'m, T: Real> {
    model: &'m Model<T>,
    z_e: Vec<Tensor<T>>,
}

impl<T: Real> Autoregressive for Stepper<'_, T> {
    type State = StepState<T>;

    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    fn initial_state(&self) -> Result<StepState<T>> {
        let hidden = match &self.model.arch {
            Arch::Latent(a) => {
                let mut g = Graph::new();
                let mut cx = Ctx::inference(&mut g, &self.model.params);
                let root = cx.g.constant(self.z_e[a.init_latent].clone());
                let h = init_hidden(&mut cx, root, &a.decoder)?;
                vec![cx.g.value(h).clone()]
            }
            Arch::Lm(a) => a
                .layers
                .iter()
                .map(|l| Tensor::zeros(1, l.hidden_dim))
                .collect(),
        };
        Ok(StepState { hidden, pos: 0 })
    }

    fn step(&self, state: &mut StepState<T>, token: u32) -> Result<Vec<f64>> {
        if token as usize >= self.model.vocab_size {
            return Err(Error::OutOfRange {
                what: "token id",
                value: token as usize,
                limit: self.model.vocab_size,
            });
        }
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &self.model.params);
        let logits = match &self.model.arch {
            Arch::Latent(a) => {
                let z: Vec<Var> = self.z_e.iter().map(|t| cx.g.constant(t.clone())).collect();
                let h = cx.g.constant(state.hidden[0].clone());
                let emb = cx.p(a.decoder.embedding);
                let x = cx.g.embedding_lookup(emb, &[token as usize])?;
                let (logits, h2) = decode_step(&mut cx, h, x, &z, &a.decoder)?;
                state.hidden[0] = cx.g.value(h2).clone();
                logits
            }
            Arch::Lm(a) => {
                let emb = cx.p(a.embedding);
                let mut x = cx.g.embedding_lookup(emb, &[token as usize])?;
                if let Some(roles) = a.roles {
                    let table = cx.p(roles);
                    let r =
                        cx.g.embedding_lookup(table, &[role_of_position(state.pos)])?;
                    x = cx.g.concat_cols(&[x, r])?;
                }
                for (l, layer) in a.layers.iter().enumerate() {
                    let h = cx.g.constant(state.hidden[l].clone());
                    x = crate::encoder::gru_step(&mut cx, x, h, layer)?;
                    state.hidden[l] = cx.g.value(x).clone();
                }
                let w = cx.p(a.out_w);
                let b = cx.p(a.out_b);
                let l = cx.g.matmul(x, w)?;
                cx.g.add(l, b)?
            }
        };
        state.pos += 1;
        Ok(cx
            .g
            .value(logits)
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }
}
