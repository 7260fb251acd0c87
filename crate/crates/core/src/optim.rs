//! Adaptive moment estimation over a [`ParamStore`].

use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Matrix, Matrix)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients of frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) -> Result<()> {
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - math::powf(beta1, t);
        let c2 = 1.0 - math::powf(beta2, t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| {
                (Matrix::zeros(grad.rows(), grad.cols()), Matrix::zeros(grad.rows(), grad.cols()))
            });
            let value = store.get_mut(*id);
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= learning_rate * mhat / (math::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}
