//! The quantized latent chain.
//!
//! Each latent owns a `K × D` codebook. Its query is an attention context
//! over the encoder states: the root (and every latent of the flat
//! ablation) attends with the mean encoder state, a child attends with its
//! parent's straight-through output. The query snaps to the nearest code.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{bilinear_attention, BilinearAttn, EncoderOutput, INIT_SCALE};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Codebook {
    pub table: ParamId,
    pub codes: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct LatentParams {
    pub codebook: Codebook,
    pub attn: BilinearAttn,
    /// Affine map from the attention context to the codebook dimension.
    pub proj: Option<(ParamId, ParamId)>,
    pub parent: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct LatentChain {
    pub latents: Vec<LatentParams>,
}

impl LatentChain {
    /// A linear chain when `hierarchical`, otherwise `m` independent
    /// latents all queried from the mean encoder state.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        m: usize,
        codes: usize,
        dim: usize,
        enc_dim: usize,
        hierarchical: bool,
        project: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if m == 0 || codes == 0 || dim == 0 {
            return Err(Error::Config(
                "latent count, codes and dim must be positive".into(),
            ));
        }
        if !project && dim != enc_dim {
            return Err(Error::Config(format!(
                "without query projection latent_dim ({dim}) must equal 2 x enc_hidden ({enc_dim})"
            )));
        }
        let bound = 1.0 / codes as f64;
        let latents = (0..m)
            .map(|i| {
                let parent = (hierarchical && i > 0).then(|| i - 1);
                let query_dim = if parent.is_some() { dim } else { enc_dim };
                let table = store.uniform(format!("latent{i}.codebook"), codes, dim, bound, rng);
                let attn =
                    BilinearAttn::new(store, &format!("latent{i}.attn"), query_dim, enc_dim, rng);
                let proj = project.then(|| {
                    (
                        store.uniform(format!("latent{i}.proj.w"), enc_dim, dim, INIT_SCALE, rng),
                        store.zeros(format!("latent{i}.proj.b"), 1, dim),
                    )
                });
                LatentParams {
                    codebook: Codebook { table, codes, dim },
                    attn,
                    proj,
                    parent,
                }
            })
            .collect();
        Ok(Self { latents })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn codes(&self) -> usize {
        self.latents[0].codebook.codes
    }

    pub fn dim(&self) -> usize {
        self.latents[0].codebook.dim
    }

    /// `i` followed by every latent descending from it, in chain order.
    pub fn descendants(&self, i: usize) -> Vec<usize> {
        let mut out = vec![i];
        for (j, l) in self.latents.iter().enumerate().skip(i + 1) {
            if l.parent.is_some_and(|p| out.contains(&p)) {
                out.push(j);
            }
        }
        out
    }
}

/// Nearest codebook row to `query` by squared L2; the lowest index wins
/// ties. Returns the index and its squared distance.
pub fn quantize<T: Real>(query: &[T], codebook: &Tensor<T>) -> Result<(usize, T)> {
    if query.len() != codebook.cols() {
        return Err(Error::Shape {
            op: "quantize",
            lhs: (1, query.len()),
            rhs: codebook.shape(),
        });
    }
    let mut best = (0, T::infinity());
    for k in 0..codebook.rows() {
        let d = query
            .iter()
            .zip(codebook.row_slice(k))
            .map(|(&q, &e)| (q - e) * (q - e))
            .fold(T::zero(), |a, b| a + b);
        if d < best.1 {
            best = (k, d);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::NonFinite("a quantization query".into()));
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct LatentAssignment {
    /// `B × D` encoding-function output.
    pub query: Var,
    /// Chosen code per batch row. The posterior is one-hot on it.
    pub codes: Vec<usize>,
    /// Gathered codebook rows `e*`.
    pub embedding: Var,
    /// Straight-through output: value of `e*`, gradient routed to `query`.
    pub decoder_input: Var,
    /// Attention weights over encoder positions.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct ChainAssignment {
    pub latents: Vec<LatentAssignment>,
}

impl ChainAssignment {
    /// Codes of batch row `b`, root first.
    pub fn codes(&self, b: usize) -> Vec<usize> {
        self.latents.iter().map(|l| l.codes[b]).collect()
    }

    pub fn decoder_inputs(&self) -> Vec<Var> {
        self.latents.iter().map(|l| l.decoder_input).collect()
    }

    /// Posterior mass `q(z_i = k)` for batch row `b`.
    pub fn posterior(&self, latent: usize, b: usize, k: usize) -> f64 {
        if self.latents[latent].codes[b] == k {
            1.0
        } else {
            0.0
        }
    }
}

pub fn infer_chain<T: Real>(
    cx: &mut Ctx<'_, T>,
    enc: &EncoderOutput,
    chain: &LatentChain,
) -> Result<ChainAssignment> {
    infer_chain_with(cx, enc, chain, &vec![None; chain.len()])
}

/// Like [`infer_chain`] but latents with `forced[i] = Some(k)` take code
/// `k` for every batch row instead of their nearest code.
pub fn infer_chain_with<T: Real>(
    cx: &mut Ctx<'_, T>,
    enc: &EncoderOutput,
    chain: &LatentChain,
    forced: &[Option<usize>],
) -> Result<ChainAssignment> {
    if forced.len() != chain.len() {
        return Err(Error::Invalid(format!(
            "{} overrides for {} latents",
            forced.len(),
            chain.len()
        )));
    }
    let mut out: Vec<LatentAssignment> = Vec::with_capacity(chain.len());
    for (i, lat) in chain.latents.iter().enumerate() {
        let attn_query = match lat.parent {
            Some(p) => out[p].decoder_input,
            None => enc.mean_state,
        };
        let att = bilinear_attention(cx, attn_query, &enc.states, &lat.attn)?;
        let query = match lat.proj {
            Some((w, b)) => {
                let w = cx.p(w);
                let b = cx.p(b);
                let xw = cx.g.matmul(att.context, w)?;
                cx.g.add(xw, b)?
            }
            None => att.context,
        };
        let table = cx.p(lat.codebook.table);
        let codes = match forced[i] {
            Some(k) if k >= lat.codebook.codes => {
                return Err(Error::OutOfRange {
                    what: "code",
                    value: k,
                    limit: lat.codebook.codes,
                })
            }
            Some(k) => vec![k; cx.g.shape(query).0],
            None => {
                let q = cx.g.value(query);
                let cb = cx.g.value(table);
                (0..q.rows())
                    .map(|r| quantize(q.row_slice(r), cb).map(|(k, _)| k))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let embedding = cx.g.embedding_lookup(table, &codes)?;
        let decoder_input = cx.g.straight_through(query, embedding)?;
        out.push(LatentAssignment {
            query,
            codes,
            embedding,
            decoder_input,
            attention: att.weights,
        });
    }
    Ok(ChainAssignment { latents: out })
}

fn mean_distance<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.squared_l2_distance(a, b)?;
    g.mean(d)
}

/// `(1/M) Σ_j mean_b ||sg(q_j) - e*_j||²`; trains only the codebooks.
pub fn reconstruct_loss<T: Real>(g: &mut Graph<T>, a: &ChainAssignment) -> Result<Var> {
    if a.latents.is_empty() {
        return Err(Error::Empty("chain assignment"));
    }
    let parts = a
        .latents
        .iter()
        .map(|l| {
            let q = g.stop_gradient(l.query)?;
            mean_distance(g, q, l.embedding)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = g.add_n(&parts)?;
    g.scale(total, 1.0 / parts.len() as f64)
}

/// `(β/M) Σ_j mean_b ||q_j - sg(e*_j)||²`; trains only the queries.
pub fn commit_loss<T: Real>(g: &mut Graph<T>, a: &ChainAssignment, beta: f64) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if a.latents.is_empty() {
        return Err(Error::Empty("chain assignment"));
    }
    let parts = a
        .latents
        .iter()
        .map(|l| {
            let e = g.stop_gradient(l.embedding)?;
            mean_distance(g, l.query, e)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = g.add_n(&parts)?;
    g.scale(total, beta / parts.len() as f64)
}

/// Decoder-side latent embeddings `z_e`, root first.
pub fn straight_through(a: &ChainAssignment) -> Vec<Var> {
    a.decoder_inputs()
}

/// Per-latent histogram of chosen codes over the batch.
pub fn usage_histogram(a: &ChainAssignment, codes: usize) -> Vec<Vec<usize>> {
    a.latents
        .iter()
        .map(|l| {
            let mut h = vec![0; codes];
            for &k in &l.codes {
                h[k] += 1;
            }
            h
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_sequence, EncoderParams};
    use rand::{Rng, SeedableRng};

    #[test]
    fn nearest_by_inspection() {
        let cb = Tensor::<f64>::from_f64(2, 2, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let (k, d) = quantize(&[0.1, 0.1], &cb).unwrap();
        assert_eq!(k, 0);
        assert!((d - 0.02).abs() < 1e-12);
    }

    #[test]
    fn exact_row_and_ties() {
        let cb = Tensor::from_f64(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(quantize(&[0.0, 1.0], &cb).unwrap().0, 1);
        // Rows 0 and 2 are identical: lowest index wins.
        assert_eq!(quantize(&[1.0, 0.0], &cb).unwrap().0, 0);
        // Equidistant from rows 0 and 1.
        assert_eq!(quantize(&[0.5, 0.5], &cb).unwrap().0, 0);
    }

    #[test]
    fn quantize_rejects_dim_mismatch() {
        let cb = Tensor::<f64>::zeros(4, 3);
        assert!(quantize(&[0.0, 0.0], &cb).is_err());
    }

    #[test]
    fn quantize_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..300 {
            let k = [4, 17, 64][trial % 3];
            let d = 5;
            let cb =
                Tensor::from_parts(k, d, (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dists: Vec<f64> = (0..k)
                .map(|r| {
                    cb.row_slice(r)
                        .iter()
                        .zip(&q)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum()
                })
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let expect = dists.iter().position(|&x| x == min).unwrap();
            assert_eq!(quantize(&q, &cb).unwrap().0, expect);
        }
    }

    fn single_latent(g: &mut Graph<f64>, q: &[f64], e: &[f64]) -> ChainAssignment {
        let query = g.param(Tensor::row(q.to_vec()));
        let embedding = g.param(Tensor::row(e.to_vec()));
        let decoder_input = g.straight_through(query, embedding).unwrap();
        let attention = g.constant(Tensor::scalar(1.0));
        ChainAssignment {
            latents: vec![LatentAssignment {
                query,
                codes: vec![0],
                embedding,
                decoder_input,
                attention,
            }],
        }
    }

    #[test]
    fn unit_displacement_losses() {
        let mut g = Graph::new();
        let a = single_latent(&mut g, &[1.0, 0.0], &[0.0, 0.0]);
        let r = reconstruct_loss(&mut g, &a).unwrap();
        let c = commit_loss(&mut g, &a, 0.25).unwrap();
        assert_eq!(g.value(r).item(), 1.0);
        assert_eq!(g.value(c).item(), 0.25);
    }

    #[test]
    fn zero_displacement_losses() {
        let mut g = Graph::new();
        let a = single_latent(&mut g, &[0.3, -0.2], &[0.3, -0.2]);
        let r = reconstruct_loss(&mut g, &a).unwrap();
        let c = commit_loss(&mut g, &a, 0.25).unwrap();
        assert_eq!(g.value(r).item(), 0.0);
        assert_eq!(g.value(c).item(), 0.0);
    }

    fn grad_or_zero(g: &Graph<f64>, v: Var) -> Vec<f64> {
        g.grad(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; g.value(v).len()])
    }

    #[test]
    fn reconstruct_gradient_reaches_only_codebook() {
        let mut g = Graph::new();
        let a = single_latent(&mut g, &[1.0, 0.5], &[0.0, -0.5]);
        let r = reconstruct_loss(&mut g, &a).unwrap();
        g.backward(r).unwrap();
        let l = &a.latents[0];
        assert_eq!(grad_or_zero(&g, l.query), [0.0, 0.0]);
        assert_eq!(grad_or_zero(&g, l.embedding), [-2.0, -2.0]);
    }

    #[test]
    fn commit_gradient_reaches_only_query() {
        let mut g = Graph::new();
        let a = single_latent(&mut g, &[1.0, 0.5], &[0.0, -0.5]);
        let c = commit_loss(&mut g, &a, 0.25).unwrap();
        g.backward(c).unwrap();
        let l = &a.latents[0];
        assert_eq!(grad_or_zero(&g, l.embedding), [0.0, 0.0]);
        assert_eq!(grad_or_zero(&g, l.query), [0.5, 0.5]);
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut g = Graph::new();
        let a = single_latent(&mut g, &[0.2, 0.9], &[0.5, -1.5]);
        let z = straight_through(&a)[0];
        assert_eq!(g.value(z).data(), &[0.5, -1.5]);
        let sq = g.mul(z, z).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        let l = &a.latents[0];
        assert_eq!(grad_or_zero(&g, l.query), [1.0, -3.0]);
        assert_eq!(grad_or_zero(&g, l.query), grad_or_zero(&g, z));
        assert_eq!(grad_or_zero(&g, l.embedding), [0.0, 0.0]);
    }

    struct Fixture {
        store: ParamStore<f64>,
        enc: EncoderParams,
        chain: LatentChain,
    }

    fn fixture(m: usize, hierarchical: bool) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let emb = store.uniform("emb", 12, 6, 0.5, &mut rng);
        let enc = EncoderParams::new(&mut store, emb, 6, 5, &mut rng);
        let chain =
            LatentChain::new(&mut store, m, 6, 4, 10, hierarchical, true, &mut rng).unwrap();
        Fixture { store, enc, chain }
    }

    #[test]
    fn chain_inference_is_deterministic_and_one_hot() {
        let f = fixture(3, true);
        let toks = vec![vec![1, 5, 7, 2], vec![3, 3, 9, 11]];
        let run = || {
            let mut g = Graph::new();
            let mut cx = Ctx::inference(&mut g, &f.store);
            let e = encode_sequence(&mut cx, &toks, &f.enc).unwrap();
            let a = infer_chain(&mut cx, &e, &f.chain).unwrap();
            for (i, l) in a.latents.iter().enumerate() {
                for b in 0..2 {
                    let q = cx.g.value(l.query);
                    let cb = cx.store().get(f.chain.latents[i].codebook.table);
                    assert_eq!(quantize(q.row_slice(b), cb).unwrap().0, l.codes[b]);
                    let mass: f64 = (0..6).map(|k| a.posterior(i, b, k)).sum();
                    assert_eq!(mass, 1.0);
                    assert_eq!(a.posterior(i, b, l.codes[b]), 1.0);
                }
            }
            (a.codes(0), a.codes(1))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_latent_root_uses_mean_state() {
        let f = fixture(1, true);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &f.store);
        let e = encode_sequence(&mut cx, &[vec![1, 2, 3]], &f.enc).unwrap();
        let a = infer_chain(&mut cx, &e, &f.chain).unwrap();
        assert_eq!(a.latents.len(), 1);
        let w = cx.p(f.chain.latents[0].attn.w);
        let manual = crate::encoder::attend(cx.g, e.mean_state, &e.states, w).unwrap();
        assert_eq!(
            cx.g.value(manual.weights),
            cx.g.value(a.latents[0].attention)
        );
    }

    #[test]
    fn descendants_depend_on_parent_code_only() {
        let f = fixture(3, true);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &f.store);
        let e = encode_sequence(&mut cx, &[vec![4, 8, 1]], &f.enc).unwrap();
        let base = infer_chain(&mut cx, &e, &f.chain).unwrap();
        // Forcing the root to its own code leaves the whole chain unchanged.
        let mut forced = vec![None; 3];
        forced[0] = Some(base.codes(0)[0]);
        let same = infer_chain_with(&mut cx, &e, &f.chain, &forced).unwrap();
        assert_eq!(same.codes(0), base.codes(0));
        for (a, b) in same.latents.iter().zip(&base.latents) {
            assert_eq!(cx.g.value(a.query), cx.g.value(b.query));
        }
    }

    #[test]
    fn forced_code_out_of_range_is_rejected() {
        let f = fixture(2, true);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &f.store);
        let e = encode_sequence(&mut cx, &[vec![4, 8, 1]], &f.enc).unwrap();
        assert!(infer_chain_with(&mut cx, &e, &f.chain, &[Some(6), None]).is_err());
    }

    #[test]
    fn usage_sums_to_batch_size() {
        let f = fixture(3, false);
        let mut g = Graph::new();
        let mut cx = Ctx::inference(&mut g, &f.store);
        let toks: Vec<Vec<u32>> = (0..7).map(|i| vec![i, i + 1, 11 - i]).collect();
        let e = encode_sequence(&mut cx, &toks, &f.enc).unwrap();
        let a = infer_chain(&mut cx, &e, &f.chain).unwrap();
        for h in usage_histogram(&a, 6) {
            assert_eq!(h.iter().sum::<usize>(), 7);
        }
    }

    #[test]
    fn flat_chain_has_no_parents() {
        let f = fixture(4, false);
        assert!(f.chain.latents.iter().all(|l| l.parent.is_none()));
        assert_eq!(f.chain.descendants(0), [0]);
        let h = fixture(4, true);
        assert_eq!(h.chain.descendants(1), [1, 2, 3]);
    }

    #[test]
    fn unprojected_chain_requires_matching_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        assert!(LatentChain::new(&mut store, 2, 4, 8, 10, true, false, &mut rng).is_err());
        assert!(LatentChain::new(&mut store, 2, 4, 10, 10, true, false, &mut rng).is_ok());
    }
}
