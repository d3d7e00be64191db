use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing backward gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over elements of `|a - n| / max(1e-8, |a| + |n|)`.
    pub max_relative_error: f64,
    /// (leaf, element) where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

/// Checks the gradients of `f` with respect to `leaves` against central
/// finite differences with step `eps`.
///
/// `f` receives a fresh graph and the leaf handles and returns a scalar.
/// The check only reports; it never asserts, so non-differentiable points
/// show up as a large error rather than a panic.
///
/// Stop-gradient and straight-through nodes deliberately report something
/// other than the derivative of their literal forward pass. In the
/// perturbed evaluations a stop-gradient node keeps its unperturbed value
/// and a straight-through node emits `query + (code - query)` with the
/// offset taken at the unperturbed point. Both agree with the real forward
/// pass at that point, and their true derivatives are what the backward
/// rules report.
pub fn finite_diff_check<T, F>(mut f: F, leaves: &[Tensor<T>], eps: f64) -> Result<GradCheck>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if g.shape(loss) != (1, 1) {
        return Err(Error::NotScalar(g.shape(loss)));
    }
    g.backward(loss)?;
    let frozen = g.frozen_values();
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| {
            g.grad(*v)
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let mut eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        g.freeze(frozen.clone());
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item().as_f64())
    };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    let mut work: Vec<Tensor<T>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.len() {
            let x = leaf.data()[e];
            work[li].data_mut()[e] = x + T::lit(eps);
            let plus = eval(&work)?;
            work[li].data_mut()[e] = x - T::lit(eps);
            let minus = eval(&work)?;
            work[li].data_mut()[e] = x;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[li].data()[e].as_f64();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.elements += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = (li, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
