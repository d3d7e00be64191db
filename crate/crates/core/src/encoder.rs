//! GRU cells, the bidirectional sequence encoder and bilinear attention.

use std::io::{BufRead, BufReader, Read};

use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Bound on the uniform initializer for weights; biases start at zero.
pub const INIT_SCALE: f64 = 0.1;

/// A GRU cell with fused gate matrices.
///
/// `w` is `input × 3H` (update, reset, candidate), `u_zr` is `H × 2H`,
/// `u_h` is `H × H` and `b` is `1 × 3H`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = hidden_dim;
        Self {
            w: store.uniform(format!("{name}.w"), input_dim, 3 * h, INIT_SCALE, rng),
            u_zr: store.uniform(format!("{name}.u_zr"), h, 2 * h, INIT_SCALE, rng),
            u_h: store.uniform(format!("{name}.u_h"), h, h, INIT_SCALE, rng),
            b: store.zeros(format!("{name}.b"), 1, 3 * h),
            input_dim,
            hidden_dim,
        }
    }

    /// Input projection `x·W + b` for a stack of inputs, one per row.
    pub fn project_inputs<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (_, c) = cx.g.shape(x);
        if c != self.input_dim {
            return Err(Error::Shape {
                op: "gru_step",
                lhs: cx.g.shape(x),
                rhs: (self.input_dim, 3 * self.hidden_dim),
            });
        }
        let w = cx.p(self.w);
        let b = cx.p(self.b);
        let xw = cx.g.matmul(x, w)?;
        cx.g.add(xw, b)
    }

    /// One step given the precomputed input projection `xw` (`B × 3H`).
    pub fn step_projected<T: Real>(&self, cx: &mut Ctx<'_, T>, xw: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        let (rows, c) = cx.g.shape(h);
        if c != hd || cx.g.shape(xw) != (rows, 3 * hd) {
            return Err(Error::Shape {
                op: "gru_step",
                lhs: cx.g.shape(h),
                rhs: (rows, hd),
            });
        }
        let u_zr = cx.p(self.u_zr);
        let u_h = cx.p(self.u_h);
        let g = &mut *cx.g;
        let hu = g.matmul(h, u_zr)?;
        let xz = g.slice_cols(xw, 0, hd)?;
        let hz = g.slice_cols(hu, 0, hd)?;
        let z_in = g.add(xz, hz)?;
        let z = g.sigmoid(z_in)?;
        let xr = g.slice_cols(xw, hd, hd)?;
        let hr = g.slice_cols(hu, hd, hd)?;
        let r_in = g.add(xr, hr)?;
        let r = g.sigmoid(r_in)?;
        let rh = g.mul(r, h)?;
        let xh = g.slice_cols(xw, 2 * hd, hd)?;
        let uh = g.matmul(rh, u_h)?;
        let c_in = g.add(xh, uh)?;
        let cand = g.tanh(c_in)?;
        let diff = g.sub(cand, h)?;
        let upd = g.mul(z, diff)?;
        g.add(h, upd)
    }
}

/// `h' = (1 - z)·h + z·h̃` for a batch of inputs `x` (`B × input`) and
/// states `h` (`B × H`).
pub fn gru_step<T: Real>(cx: &mut Ctx<'_, T>, x: Var, h: Var, p: &GruParams) -> Result<Var> {
    let (hr, hc) = cx.g.shape(h);
    if hc != p.hidden_dim || cx.g.shape(x).0 != hr {
        return Err(Error::Shape {
            op: "gru_step",
            lhs: cx.g.shape(x),
            rhs: (hr, hc),
        });
    }
    let xw = p.project_inputs(cx, x)?;
    p.step_projected(cx, xw, h)
}

/// Bilinear attention parameters `W` of shape `query_dim × key_dim`.
#[derive(Clone, Debug)]
pub struct BilinearAttn {
    pub w: ParamId,
    pub query_dim: usize,
    pub key_dim: usize,
}

impl BilinearAttn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: store.uniform(format!("{name}.w"), query_dim, key_dim, INIT_SCALE, rng),
            query_dim,
            key_dim,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `B × key_dim`.
    pub context: Var,
    /// `B × n_keys`, rows sum to one.
    pub weights: Var,
}

/// Scores `q·W·k_j`, softmaxed over `j`; the context is the weighted sum
/// of keys. Each key is a `B × key_dim` var holding one slot per row.
pub fn attend<T: Real>(g: &mut Graph<T>, query: Var, keys: &[Var], w: Var) -> Result<Attention> {
    if keys.is_empty() {
        return Err(Error::Empty("attention keys"));
    }
    let (qr, qc) = g.shape(query);
    let (wr, wc) = g.shape(w);
    if qc != wr {
        return Err(Error::Shape {
            op: "bilinear_attention",
            lhs: (qr, qc),
            rhs: (wr, wc),
        });
    }
    for &k in keys {
        if g.shape(k) != (qr, wc) {
            return Err(Error::Shape {
                op: "bilinear_attention",
                lhs: (qr, wc),
                rhs: g.shape(k),
            });
        }
    }
    let qw = g.matmul(query, w)?;
    let scores = keys
        .iter()
        .map(|&k| g.row_dot(qw, k))
        .collect::<Result<Vec<_>>>()?;
    let scores = g.concat_cols(&scores)?;
    let weights = g.softmax_rows(scores)?;
    let parts = keys
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let wj = g.slice_cols(weights, j, 1)?;
            g.scale_rows(k, wj)
        })
        .collect::<Result<Vec<_>>>()?;
    let context = g.add_n(&parts)?;
    Ok(Attention { context, weights })
}

pub fn bilinear_attention<T: Real>(
    cx: &mut Ctx<'_, T>,
    query: Var,
    keys: &[Var],
    p: &BilinearAttn,
) -> Result<Attention> {
    let w = cx.p(p.w);
    attend(cx.g, query, keys, w)
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub fwd: GruParams,
    pub bwd: GruParams,
}

impl EncoderParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        embedding: ParamId,
        word_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            embedding,
            fwd: GruParams::new(store, "enc.fwd", word_dim, hidden, rng),
            bwd: GruParams::new(store, "enc.bwd", word_dim, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden_dim
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// One `B × 2H` var per position: forward state after `t` steps joined
    /// with the backward state that has consumed positions `t..n`.
    pub states: Vec<Var>,
    /// Arithmetic mean of `states`.
    pub mean_state: Var,
}

impl EncoderOutput {
    /// States of batch row `b` as an `n × 2H` tensor.
    pub fn states_matrix<T: Real>(&self, g: &Graph<T>, b: usize) -> Tensor<T> {
        let rows: Vec<Vec<T>> = self
            .states
            .iter()
            .map(|&s| g.value(s).row_slice(b).to_vec())
            .collect();
        Tensor::from_rows(&rows).expect("non-empty states")
    }
}

fn check_batch(tokens: &[Vec<u32>]) -> Result<usize> {
    let n = tokens.first().map(Vec::len).ok_or(Error::Empty("batch"))?;
    if n == 0 {
        return Err(Error::Empty("token sequence"));
    }
    if let Some(bad) = tokens.iter().find(|t| t.len() != n) {
        return Err(Error::Invalid(format!(
            "batch rows must share one length: {n} vs {}",
            bad.len()
        )));
    }
    Ok(n)
}

/// Embeds an equal-length batch time-major: row `t·B + b` holds token `t`
/// of sequence `b`.
pub fn embed_time_major<T: Real>(
    cx: &mut Ctx<'_, T>,
    table: ParamId,
    tokens: &[Vec<u32>],
) -> Result<Var> {
    let n = check_batch(tokens)?;
    let ids: Vec<usize> = (0..n)
        .flat_map(|t| tokens.iter().map(move |s| s[t] as usize))
        .collect();
    let e = cx.p(table);
    cx.g.embedding_lookup(e, &ids)
}

/// Runs a GRU over the time-major projected inputs `xw` in the given
/// order of time steps and returns the state after each step.
fn run_gru<T: Real>(
    cx: &mut Ctx<'_, T>,
    p: &GruParams,
    xw: Var,
    batch: usize,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<(usize, Var)>> {
    let mut h = cx.g.constant(Tensor::zeros(batch, p.hidden_dim));
    let mut out = Vec::new();
    for t in order {
        let x_t = cx.g.slice_rows(xw, t * batch, batch)?;
        h = p.step_projected(cx, x_t, h)?;
        out.push((t, h));
    }
    Ok(out)
}

/// Encodes an equal-length batch of token sequences.
pub fn encode_sequence<T: Real>(
    cx: &mut Ctx<'_, T>,
    tokens: &[Vec<u32>],
    p: &EncoderParams,
) -> Result<EncoderOutput> {
    let n = check_batch(tokens)?;
    let b = tokens.len();
    let x = embed_time_major(cx, p.embedding, tokens)?;
    let xf = p.fwd.project_inputs(cx, x)?;
    let xb = p.bwd.project_inputs(cx, x)?;
    let fwd = run_gru(cx, &p.fwd, xf, b, 0..n)?;
    let mut bwd = run_gru(cx, &p.bwd, xb, b, (0..n).rev())?;
    bwd.reverse();
    let states = fwd
        .iter()
        .zip(&bwd)
        .map(|(&(_, f), &(_, r))| cx.g.concat_cols(&[f, r]))
        .collect::<Result<Vec<_>>>()?;
    let total = cx.g.add_n(&states)?;
    let mean_state = cx.g.scale(total, 1.0 / n as f64)?;
    Ok(EncoderOutput { states, mean_state })
}

/// Overwrites rows of `table` from whitespace-separated `token v1 .. vD`
/// lines. Tokens missing from `vocab` are skipped. Returns the number of
/// rows replaced.
pub fn import_embeddings<T: Real, R: Read>(
    reader: R,
    vocab: &Vocabulary,
    table: &mut Tensor<T>,
) -> Result<usize> {
    let dim = table.cols();
    let mut loaded = 0;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("vector has {} values, expected {dim}", values.len()),
            });
        }
        if !vocab.contains(token) {
            continue;
        }
        let row = vocab.encode(token) as usize;
        for (c, v) in values.into_iter().enumerate() {
            table.set(row, c, T::lit(v));
        }
        loaded += 1;
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn zero_gru_halves_state() {
        let mut store = ParamStore::<f64>::new();
        let p = GruParams::new(&mut store, "g", 3, 2, &mut rng());
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &store);
        let x = cx.g.constant(Tensor::row(vec![0.3, -1.0, 2.0]));
        let h = cx.g.constant(Tensor::row(vec![0.8, -0.4]));
        let h2 = gru_step(&mut cx, x, h, &p).unwrap();
        assert_eq!(cx.g.value(h2).data(), &[0.4, -0.2]);
    }

    #[test]
    fn gru_rejects_wrong_hidden_dim() {
        let mut store = ParamStore::<f64>::new();
        let p = GruParams::new(&mut store, "g", 3, 2, &mut rng());
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &store);
        let x = cx.g.constant(Tensor::row(vec![0.0; 3]));
        let h = cx.g.constant(Tensor::row(vec![0.0; 3]));
        assert!(matches!(
            gru_step(&mut cx, x, h, &p),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gru_state_stays_bounded() {
        let mut store = ParamStore::<f64>::new();
        let p = GruParams::new(&mut store, "g", 4, 6, &mut rng());
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &store);
        let mut h = cx.g.constant(Tensor::row(vec![0.9; 6]));
        for i in 0..20 {
            let x = cx.g.constant(Tensor::row(vec![(i as f64).sin() * 5.0; 4]));
            h = gru_step(&mut cx, x, h, &p).unwrap();
            assert!(cx.g.value(h).data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let p = GruParams::new(&mut store, "g", 4, 6, &mut rng());
        let mut leaves: Vec<Tensor<f64>> = store.tensors().to_vec();
        leaves.push(Tensor::from_f64(2, 4, &[0.5, -0.3, 0.2, 0.9, -0.7, 0.1, 0.4, -0.2]).unwrap());
        leaves.push(
            Tensor::from_f64(
                2,
                6,
                &[
                    0.1, -0.2, 0.3, -0.4, 0.5, -0.6, 0.2, 0.2, -0.1, 0.0, 0.3, 0.1,
                ],
            )
            .unwrap(),
        );
        let check = finite_diff_check(
            |g, vs| {
                let mut cx = Ctx::prebound(g, &store, &vs[..4]);
                let h = gru_step(&mut cx, vs[4], vs[5], &p)?;
                let h = gru_step(&mut cx, vs[4], h, &p)?;
                let sq = cx.g.mul(h, h)?;
                cx.g.sum(sq)
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(check.max_relative_error < 1e-6, "{check:?}");
    }

    fn attn_fixture(query: &[f64], keys: &[&[f64]], w: Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(query.to_vec()));
        let ks: Vec<Var> = keys
            .iter()
            .map(|k| g.constant(Tensor::row(k.to_vec())))
            .collect();
        let w = g.constant(w);
        let a = attend(&mut g, q, &ks, w).unwrap();
        (
            g.value(a.context).data().to_vec(),
            g.value(a.weights).data().to_vec(),
        )
    }

    #[test]
    fn identity_attention_hand_computed() {
        let (ctx, w) = attn_fixture(
            &[1.0, 0.0],
            &[&[1.0, 0.0], &[0.0, 1.0]],
            Tensor::identity(2),
        );
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((ctx[0] - w[0]).abs() < 1e-12 && (ctx[1] - w[1]).abs() < 1e-12);
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (ctx, w) = attn_fixture(&[0.3, 0.7], &[&[2.0, -1.0]], Tensor::identity(2));
        assert_eq!(w, [1.0]);
        assert_eq!(ctx, [2.0, -1.0]);
    }

    #[test]
    fn identical_keys_get_uniform_weight() {
        let k: &[f64] = &[0.5, -0.25];
        let (ctx, w) = attn_fixture(&[3.0, 1.0], &[k, k, k, k], Tensor::identity(2));
        for wi in &w {
            assert!((wi - 0.25).abs() < 1e-12);
        }
        assert!((ctx[0] - 0.5).abs() < 1e-12 && (ctx[1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_keys_are_rejected() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::row(vec![1.0]));
        let w = g.constant(Tensor::identity(1));
        assert!(matches!(attend(&mut g, q, &[], w), Err(Error::Empty(_))));
    }

    fn encoder(store: &mut ParamStore<f64>, tie: bool) -> EncoderParams {
        let mut r = rng();
        let emb = store.uniform("emb", 10, 5, 0.5, &mut r);
        let mut p = EncoderParams::new(store, emb, 5, 4, &mut r);
        if tie {
            p.bwd = p.fwd.clone();
        }
        p
    }

    #[test]
    fn singleton_sequence_mean_is_its_state() {
        let mut store = ParamStore::new();
        let p = encoder(&mut store, false);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &store);
        let out = encode_sequence(&mut cx, &[vec![3]], &p).unwrap();
        assert_eq!(out.states.len(), 1);
        assert_eq!(cx.g.value(out.mean_state), cx.g.value(out.states[0]));
    }

    #[test]
    fn mean_state_is_row_mean() {
        let mut store = ParamStore::new();
        let p = encoder(&mut store, false);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &store);
        let out = encode_sequence(&mut cx, &[vec![1, 2, 3, 4, 5]], &p).unwrap();
        let m = out.states_matrix(cx.g, 0);
        assert_eq!(m.shape(), (5, 8));
        let mean = cx.g.value(out.mean_state);
        for c in 0..8 {
            let avg: f64 = (0..5).map(|r| m.get(r, c)).sum::<f64>() / 5.0;
            assert!((avg - mean.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn palindrome_with_tied_directions_is_mirrored() {
        let mut store = ParamStore::new();
        let p = encoder(&mut store, true);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &store);
        let out = encode_sequence(&mut cx, &[vec![1, 4, 7, 4, 1]], &p).unwrap();
        let m = out.states_matrix(cx.g, 0);
        for t in 0..5 {
            for c in 0..4 {
                assert_eq!(m.get(t, c), m.get(4 - t, 4 + c));
            }
        }
    }

    #[test]
    fn prefix_reproduces_forward_states() {
        let mut store = ParamStore::new();
        let p = encoder(&mut store, false);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &store);
        let full = encode_sequence(&mut cx, &[vec![5, 6, 7, 8, 9]], &p).unwrap();
        let pre = encode_sequence(&mut cx, &[vec![5, 6, 7]], &p).unwrap();
        let a = full.states_matrix(cx.g, 0);
        let b = pre.states_matrix(cx.g, 0);
        for t in 0..3 {
            assert_eq!(&a.row_slice(t)[..4], &b.row_slice(t)[..4]);
        }
    }

    #[test]
    fn batched_encoding_matches_single() {
        let mut store = ParamStore::new();
        let p = encoder(&mut store, false);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &store);
        let batch = encode_sequence(&mut cx, &[vec![1, 2, 3], vec![7, 8, 9]], &p).unwrap();
        let one = encode_sequence(&mut cx, &[vec![7, 8, 9]], &p).unwrap();
        let a = batch.states_matrix(cx.g, 1);
        let b = one.states_matrix(cx.g, 0);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_ragged_batches_are_rejected() {
        let mut store = ParamStore::new();
        let p = encoder(&mut store, false);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &store);
        assert!(encode_sequence(&mut cx, &[vec![]], &p).is_err());
        assert!(encode_sequence(&mut cx, &[vec![1], vec![1, 2]], &p).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let p = encoder(&mut store, false);
        let leaves = store.tensors().to_vec();
        let check = finite_diff_check(
            |g, vs| {
                let mut cx = Ctx::prebound(g, &store, vs);
                let out = encode_sequence(&mut cx, &[vec![1, 2, 3], vec![4, 2, 0]], &p)?;
                let sq = cx.g.mul(out.mean_state, out.mean_state)?;
                cx.g.sum(sq)
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn import_overwrites_known_rows() {
        let vocab = Vocabulary::from_tokens(
            crate::corpus::Vocabulary::RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(["fire".to_string()])
                .collect(),
        );
        let mut table = Tensor::<f32>::zeros(vocab.len(), 2);
        let text = "fire 1.5 -2\nunknownword 3 3\n\n";
        let n = import_embeddings(text.as_bytes(), &vocab, &mut table).unwrap();
        assert_eq!(n, 1);
        assert_eq!(table.row_slice(vocab.encode("fire") as usize), &[1.5, -2.0]);
        assert!(import_embeddings("fire 1\n".as_bytes(), &vocab, &mut table).is_err());
    }
}
