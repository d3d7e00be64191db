//! Nearest-code lookup, the straight-through estimator, and the latent
//! chain of an untrained model on one batch.

mod common;

use haqae::config::Variant;
use haqae::model::build_variant;
use haqae::params::Ctx;
use haqae::tensor::{Graph, Tensor};
use haqae::vq::{quantize, usage_histogram};

fn main() -> haqae::Result<()> {
    let codebook = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![-1.0, 0.5]])?;
    let (k, d2) = quantize(&[0.8f64, 0.6], &codebook)?;
    println!("query (0.8, 0.6) -> code {k}, squared distance {d2:.2}");

    // Forward takes the code's value; backward hands the gradient to the query.
    let mut g = Graph::<f64>::new();
    let q = g.param(Tensor::row(vec![0.8, 0.6]));
    let e = g.param(Tensor::row(codebook.row_slice(k).to_vec()));
    let st = g.straight_through(q, e)?;
    let loss = g.sum(st)?;
    g.backward(loss)?;
    println!("forward value {:?}", g.value(st).data());
    println!(
        "grad to query {:?}, grad to code {:?}",
        g.grad(q).map(|t| t.into_data()),
        g.grad(e)
    );

    let data = common::synthetic(200);
    let model = build_variant::<f64>(&common::small_config(Variant::Haqae, 1), data.vocab.len())?;
    let words = data.ids(&data.train);
    let len = words[0].len();
    let batch: Vec<Vec<u32>> = words
        .into_iter()
        .filter(|w| w.len() == len)
        .take(8)
        .collect();

    let mut g = Graph::new();
    let mut cx = Ctx::inference(&mut g, &model.params);
    let parts = model.loss(&mut cx, &batch)?;
    let a = parts.assignment.as_ref().expect("latent model");
    println!("\n{} sequences of {len} words", batch.len());
    for b in 0..batch.len() {
        println!("  codes {:?}", a.codes(b));
    }
    println!(
        "usage per latent {:?}",
        usage_histogram(a, model.config.codes)
    );
    let v = |x| cx.g.value(x).item();
    println!(
        "nll {:.4}  recon {:.4}  commit {:.4}  total {:.4}",
        v(parts.nll),
        v(parts.recon.unwrap()),
        v(parts.commit.unwrap()),
        v(parts.total)
    );
    Ok(())
}
