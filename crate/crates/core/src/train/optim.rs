//! Cosine-annealed SGD with momentum.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Param;

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2`, with the
/// endpoints returned exactly.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    if step == 0 || total_steps == 0 {
        return lr0;
    }
    if step >= total_steps {
        return lr_min;
    }
    let t = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One update in place: `v = momentum * v + g + wd * p`, then `p -= lr * v`.
pub fn sgd_step<T: Scalar>(
    value: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if value.len() != grad.len() || value.len() != velocity.len() {
        return Err(Error::Contract(format!(
            "sgd step over {} values with {} gradients and {} velocities",
            value.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let (lr, m, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(weight_decay),
    );
    for ((p, g), v) in value.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = m * *v + *g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// Steps every trainable parameter and clears its gradient. Frozen
    /// parameters are skipped untouched.
    pub fn step<'a, T: Scalar, I>(&self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Param<T>>,
    {
        for p in params {
            if !p.is_trainable() {
                continue;
            }
            let (value, grad, velocity) = p.split_mut();
            sgd_step(value, grad, velocity, lr, self.momentum, self.weight_decay)?;
            p.zero_grad();
        }
        Ok(())
    }
}
