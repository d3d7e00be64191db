//! Build a small expression on the tape, run backward, and compare the
//! gradients with central differences.

use haqae::tensor::{finite_diff_check, Graph, Tensor};

fn main() -> haqae::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.4]])?;
    let w = Tensor::from_rows(&[vec![0.7, -0.2], vec![0.05, 0.9], vec![-0.6, 0.3]])?;

    let mut g = Graph::<f64>::new();
    let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
    let h = g.matmul(xv, wv)?;
    let h = g.tanh(h)?;
    let logp = g.log_softmax_rows(h)?;
    let picked = g.pick(logp, &[1, 0])?;
    let loss = g.mean(picked)?;
    let loss = g.scale(loss, -1.0)?;
    g.backward(loss)?;
    println!("loss = {:.6}", g.value(loss).item());
    println!("dL/dW = {:?}", g.grad(wv).expect("W is a parameter").data());

    // The same function, rebuilt from scratch for every perturbation.
    let report = finite_diff_check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.tanh(h)?;
            let logp = g.log_softmax_rows(h)?;
            let picked = g.pick(logp, &[1, 0])?;
            let m = g.mean(picked)?;
            g.scale(m, -1.0)
        },
        &[x, w],
        1e-6,
    )?;
    println!(
        "{} elements checked, max relative error {:.2e}",
        report.elements, report.max_relative_error
    );
    Ok(())
}
