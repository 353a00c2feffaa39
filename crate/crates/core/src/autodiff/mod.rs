//! Dense tensors and a reverse-mode gradient tape.

mod conv;
mod graph;
mod tensor;

pub use graph::{Elementwise, Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Central-difference gradient check of a scalar function built on a [`Graph`].
///
/// `f` receives a fresh graph and the recorded input, and returns the scalar
/// root. The result is `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let root = f(&mut g, x)?;
    let analytic = g.backward(root)?.take(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(p);
        let root = f(&mut g, x)?;
        Ok(g.value(root).item())
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
