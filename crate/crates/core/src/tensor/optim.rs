use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

/// First-order optimizer over a [`ModelParams`] collection.
///
/// Adam uses moment coefficients (0.9, 0.999) and ε = 1e-8 with bias
/// correction. SGD with momentum keeps a velocity `v ← μ·v + g` and steps
/// `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        })
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr, 0.0)
    }

    pub fn sgd(lr: f64, momentum: f64) -> Result<Self> {
        Self::new(OptimizerKind::SgdMomentum, lr, momentum)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter and clears the gradients.
    /// Fails without touching anything if some parameter lacks a gradient.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (name, tensor) in params.iter_mut() {
            let grad = tensor.grad().expect("checked above").to_vec();
            let n = grad.len();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let v = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                    for ((p, g), v) in tensor.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                        *v = self.momentum * *v + g;
                        *p -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                    let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for i in 0..n {
                        let g = grad[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        tensor.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}
