//! Parameter update rules: plain SGD and Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptAlgorithm {
    Sgd,
    Adam,
}

/// Optimizer state: algorithm tag, learning rate, per-parameter Adam
/// moments, and a step counter.
pub struct Optimizer {
    pub algorithm: OptAlgorithm,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Optimizer {
            algorithm: OptAlgorithm::Sgd,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Optimizer { algorithm: OptAlgorithm::Adam, ..Optimizer::sgd(learning_rate) }
    }

    pub fn new(algorithm: OptAlgorithm, learning_rate: f64) -> Self {
        match algorithm {
            OptAlgorithm::Sgd => Optimizer::sgd(learning_rate),
            OptAlgorithm::Adam => Optimizer::adam(learning_rate),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, zero them, and
    /// advance the step counter. Errors if no backward pass populated
    /// gradients since the last step.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if !params.grads_populated() {
            return Err(Error::MissingGradients);
        }
        self.step += 1;
        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        match self.algorithm {
            OptAlgorithm::Sgd => {
                for name in &names {
                    let grad = params.grad(name)?.clone();
                    let mut value = params.value(name)?.clone();
                    for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                        *v -= self.learning_rate * g;
                    }
                    params.set_value(name, value)?;
                }
            }
            OptAlgorithm::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for name in &names {
                    let grad = params.grad(name)?.clone();
                    let mut value = params.value(name)?.clone();
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| {
                            (
                                Tensor::zeros(grad.shape().to_vec()),
                                Tensor::zeros(grad.shape().to_vec()),
                            )
                        });
                    for ((p, g), (mi, vi)) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                    params.set_value(name, value)?;
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}
