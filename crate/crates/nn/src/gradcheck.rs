//! Central finite-difference gradient verification.

use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamStore};

/// Compares an analytic gradient of `f` at `theta` against central
/// differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h`. Returns the maximum
/// relative error `|g_fd − g| / max(|g|, 1e-8)` over all coordinates.
pub fn finite_difference_check(
    theta: &[f64],
    grad: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    if theta.len() != grad.len() {
        return Err(NnError::Invalid(format!(
            "point has {} coordinates but gradient has {}",
            theta.len(),
            grad.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let fp = f(&probe)?;
        probe[i] = theta[i] - h;
        let fm = f(&probe)?;
        probe[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NnError::NonFinite(format!("f at coordinate {i}")));
        }
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Finite-difference check over every trainable coordinate of a store.
/// `f` evaluates the loss and its reverse-mode gradients.
pub fn check_store(
    store: &ParamStore<f64>,
    h: f64,
    mut f: impl FnMut(&ParamStore<f64>) -> Result<(f64, Gradients<f64>)>,
) -> Result<f64> {
    let (_, grads) = f(store)?;
    let theta = store.trainable_values();
    let grad = grads.trainable_flat(store);
    let mut probe = store.clone();
    finite_difference_check(&theta, &grad, h, |x| {
        probe.set_trainable_values(x);
        Ok(f(&probe)?.0)
    })
}
