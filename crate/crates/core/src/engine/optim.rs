//! SGD with classical momentum and polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const POLY_POWER: f64 = 0.9;

/// v <- m*v + g; p <- p - lr*v. Velocity buffers follow the parameter order
/// of [`ModelParams::named`]. A missing gradient counts as zero, so velocity
/// still decays.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &ModelParams, momentum: f64) -> Result<SgdMomentum> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "SgdMomentum::new",
                format!("momentum {momentum} must lie in [0, 1)"),
            ));
        }
        let velocity = params.named().iter().map(|(_, b)| vec![0.0; b.data.len()]).collect();
        Ok(SgdMomentum { momentum, velocity })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<()> {
        if !lr.is_finite() {
            return Err(Error::NonFinite { context: "learning rate".to_string(), value: lr });
        }
        let mut named = params.named_mut();
        if grads.len() != named.len() {
            return Err(Error::invalid(
                "SgdMomentum::step",
                format!("{} gradients for {} parameters", grads.len(), named.len()),
            ));
        }
        for ((buf, vel), grad) in named.iter_mut().zip(&mut self.velocity).zip(grads) {
            let (name, buf) = (buf.0, &mut buf.1);
            if let Some(g) = grad {
                if g.len() != buf.data.len() {
                    return Err(Error::invalid(
                        "SgdMomentum::step",
                        format!("gradient size {} for parameter {name} of size {}", g.len(), buf.data.len()),
                    ));
                }
                for ((v, p), &gi) in vel.iter_mut().zip(buf.data.iter_mut()).zip(g) {
                    *v = self.momentum * *v + gi;
                    *p -= lr * *v;
                }
            } else {
                for (v, p) in vel.iter_mut().zip(buf.data.iter_mut()) {
                    *v *= self.momentum;
                    *p -= lr * *v;
                }
            }
        }
        Ok(())
    }
}

/// base * (1 - iteration/total)^power, clamped at zero once past the end.
pub fn poly_lr(base: f64, iteration: u64, total: u64, power: f64) -> f64 {
    if total == 0 || iteration >= total {
        return 0.0;
    }
    base * (1.0 - iteration as f64 / total as f64).powf(power)
}
