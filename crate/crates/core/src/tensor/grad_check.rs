//! Central-difference verification of reverse-mode gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Default perturbation for [`grad_check`].
pub const DEFAULT_EPS: f64 = 1e-5;

/// Worst relative disagreement between the analytic gradient of `f` and a
/// central-difference estimate, over every entry of every parameter:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` must be a pure function of the parameter values: it is re-evaluated
/// many times with perturbed copies, so any internal randomness has to be
/// frozen by the caller.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for p in params {
        if !p.requires_grad() {
            return Err(Error::invalid(
                "grad_check",
                "all checked parameters must require grad".to_string(),
            ));
        }
    }

    let loss = f(params)?;
    if loss.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("f must return a scalar, got shape {:?}", loss.shape()),
        ));
    }
    // Gradients accumulate across backward calls; start from a clean slate
    // so a parameter reused by an earlier check reads only this loss.
    for p in params {
        p.clear_grad();
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let base = p.data().to_vec();
        for j in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = Vec::with_capacity(params.len());
                for (qi, q) in params.iter().enumerate() {
                    if qi == pi {
                        let mut d = base.clone();
                        d[j] += delta;
                        shifted.push(Tensor::param(q.shape(), d)?);
                    } else {
                        shifted.push(Tensor::param(q.shape(), q.data().to_vec())?);
                    }
                }
                Ok(f(&shifted)?.item())
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
