//! Central finite-difference gradient checking.
//!
//! The analytic gradient comes from the engine at the chosen precision
//! (normally `f32`, the training path). The finite differences are always
//! evaluated in `f64`: at `f32` the rounding noise of a loss evaluation
//! divided by `2 eps` is larger than the tolerance being tested.

use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

/// A scalar function of a list of parameter tensors that can be evaluated
/// at any precision.
pub trait Objective {
    fn eval<T: Real>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(param, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Analytic gradients with `f32` arithmetic against `f64` central
/// differences with step `eps`.
pub fn grad_check<O: Objective>(f: &O, params: &[Tensor<f32>], eps: f64) -> Result<GradCheckReport> {
    grad_check_at::<f32, O>(f, params, eps)
}

pub fn analytic_grads<A: Real, O: Objective>(f: &O, params: &[Tensor<f32>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::<A>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.cast::<A>())).collect();
    let loss = f.eval(&mut g, &vars)?;
    g.backward(loss)?;
    let value = g.value(loss).item().as_f64();
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    Ok((value, grads))
}

fn eval_f64<O: Objective>(f: &O, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
    let loss = f.eval(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Same as [`grad_check`] with the analytic pass at precision `A`.
pub fn grad_check_at<A: Real, O: Objective>(f: &O, params: &[Tensor<f32>], eps: f64) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_grads::<A, O>(f, params)?;
    let mut wide: Vec<Tensor<f64>> = params.iter().map(|p| p.cast()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    #[allow(clippy::needless_range_loop)]
    for pi in 0..wide.len() {
        for e in 0..wide[pi].numel() {
            let orig = wide[pi].data()[e];
            wide[pi].data_mut()[e] = orig + eps;
            let up = eval_f64(f, &wide)?;
            wide[pi].data_mut()[e] = orig - eps;
            let down = eval_f64(f, &wide)?;
            wide[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (pi, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
