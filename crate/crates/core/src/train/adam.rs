use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction. L2 regularization is folded into the gradient
/// as `g + l2_weight · θ` before the moment updates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub l2_weight: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, l2_weight: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            learning_rate,
            l2_weight,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    /// Refuses (leaving parameters untouched) if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TrainError> {
        for p in store.iter() {
            if let Some(pos) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: p.name.clone(),
                    index: pos,
                    value: p.grad.data()[pos],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((theta, &g), mi), vi) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g + self.l2_weight * *theta;
                *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= self.learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}
