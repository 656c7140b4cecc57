//! Central-difference gradient verification.
//!
//! Rebuilds the forward graph from scratch for every perturbed coordinate, so
//! the closure must be deterministic in its parameters.

use crate::graph::{Graph, Var};
use crate::tensor::{NumericsError, Tensor};

fn eval<F>(build: &mut F, params: &[Tensor]) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.scalar(loss))
}

/// Compares analytic gradients of the scalar built by `build` against central
/// differences with step `eps`, for every coordinate of every parameter.
/// Returns the maximum relative error, with a 1e-8 absolute floor in the
/// denominator so near-zero gradients do not blow the ratio up.
pub fn grad_check<F>(mut build: F, params: &[Tensor], eps: f64) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();

    let mut max_err = 0.0f64;
    for pi in 0..params.len() {
        for i in 0..params[pi].data().len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[i] += eps;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[i] -= eps;
            let numeric = (eval(&mut build, &plus)? - eval(&mut build, &minus)?) / (2.0 * eps);
            let a = analytic[pi].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
