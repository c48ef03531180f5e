//! Central finite-difference verification of reverse-mode gradients (64-bit).

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Worst coordinate found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn evaluate<Fun>(f: &Fun, inputs: &[Tensor<f64>]) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::usage(format!("gradient check needs a scalar function, got shape {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Compares the reverse-mode gradient of scalar `f` against central
/// differences `(f(x+eps·e) − f(x−eps·e)) / (2·eps)` on every coordinate of
/// every input.
pub fn check_gradients<Fun>(f: Fun, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let original = input.data()[idx];
            work[which].data_mut()[idx] = original + eps;
            let plus = evaluate(&f, &work)?;
            work[which].data_mut()[idx] = original - eps;
            let minus = evaluate(&f, &work)?;
            work[which].data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[which].data()[idx];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (which, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form: returns the maximum relative error.
pub fn gradient_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = check_gradients(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}
