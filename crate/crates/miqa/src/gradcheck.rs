//! Finite-difference gradient verification.
//!
//! `numeric_grad` perturbs one coordinate of a `Var` at a time and evaluates
//! a scalar closure, giving a central-difference estimate that is independent
//! of the autodiff engine. Intended for 64-bit parameters; step sizes around
//! 1e-5..1e-6 keep the truncation and round-off errors balanced there.

use candle_core::{Tensor, Var};

use crate::error::Result;

/// Central finite differences of `f` with respect to every coordinate of `var`.
///
/// `f` is re-evaluated with the coordinate displaced by ±`h`; the original
/// value is restored afterwards.
pub fn numeric_grad(var: &Var, h: f64, mut f: impl FnMut() -> Result<f64>) -> Result<Vec<f64>> {
    let shape = var.as_tensor().dims().to_vec();
    let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    let device = var.as_tensor().device().clone();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        var.set(&Tensor::from_vec(plus, shape.as_slice(), &device)?)?;
        let fp = f()?;
        let mut minus = base.clone();
        minus[i] -= h;
        var.set(&Tensor::from_vec(minus, shape.as_slice(), &device)?)?;
        let fm = f()?;
        grad.push((fp - fm) / (2.0 * h));
    }
    var.set(&Tensor::from_vec(base, shape.as_slice(), &device)?)?;
    Ok(grad)
}

/// Worst relative disagreement between two gradient vectors,
/// `|a - b| / max(|a|, |b|, 1)` per coordinate.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Convenience: analytic gradient of `loss` w.r.t. `var` as a flat vector
/// (zeros when the variable does not participate).
pub fn analytic_grad(loss: &Tensor, var: &Var) -> Result<Vec<f64>> {
    let grads = loss.backward()?;
    match grads.get(var.as_tensor()) {
        Some(g) => Ok(g.flatten_all()?.to_vec1::<f64>()?),
        None => Ok(vec![0.0; var.as_tensor().elem_count()]),
    }
}
