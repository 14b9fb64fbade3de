//! Stochastic gradient descent with momentum.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_momentum_step<T: Float>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: T, momentum: T) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(TensorError::dim(
            "sgd_momentum_step",
            format!("param {}, grad {}, velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Float> SgdMomentum<T> {
    pub fn new(params: &[Tensor<T>], momentum: T) -> Self {
        Self { momentum, velocity: params.iter().map(|p| vec![T::zero(); p.len()]).collect() }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Apply one update. `grads[i] == None` leaves parameter `i` untouched
    /// apart from momentum decay.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Vec<T>>], lr: T) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(TensorError::dim(
                "SgdMomentum::step",
                format!("{} params, {} grads, {} velocities", params.len(), grads.len(), self.velocity.len()),
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            match g {
                Some(g) => sgd_momentum_step(p.data_mut(), g, v, lr, self.momentum)?,
                None => {
                    let zeros = vec![T::zero(); v.len()];
                    sgd_momentum_step(p.data_mut(), &zeros, v, lr, self.momentum)?
                }
            }
        }
        Ok(())
    }
}
