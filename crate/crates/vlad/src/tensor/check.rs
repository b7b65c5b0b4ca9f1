//! Finite-difference gradient verification.
//!
//! Analytic gradients from [`Graph::backward`] are compared against central
//! differences of the loss, evaluated in f64 with a small step. The builder
//! closure is re-invoked for every perturbed evaluation, so it must be
//! deterministic (seed any random choices inside the closure).

use super::{Graph, Tensor, TensorId};
use crate::error::Result;

/// Step size for central differences. In f64, truncation and roundoff are
/// both far below the comparison tolerance at this value.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor, so near-zero gradients are judged
/// on absolute error instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-3)
}

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs the loss (a scalar tensor) from leaves registered for
/// each entry of `params`, in order. Returns the maximum relative error over
/// every element of every parameter.
pub fn grad_check<F>(params: &[Tensor<f64>], build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| g.leaf(p.clone().with_requires_grad()))
        .collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("requires_grad leaf must get a gradient").to_vec())
        .collect();

    let eval = |params: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss)[0])
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let orig = param.data()[ei];
            work[pi].data_mut()[ei] = orig + FD_STEP;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - FD_STEP;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[pi][ei], numeric));
        }
    }
    Ok(worst)
}
