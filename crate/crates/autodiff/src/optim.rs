//! First-order optimizers over plain tensors.
//!
//! Updates never touch tape values: each step produces fresh tensors.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state for a set of named tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One descent step on a single named tensor.
    pub fn update(&mut self, name: &str, value: &Tensor, grad: &Tensor) -> Tensor {
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                let data = value.data().iter().zip(grad.data()).map(|(x, g)| x - lr * g).collect();
                Tensor::new(value.shape().to_vec(), data).expect("same shape")
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.step.max(1) as i32;
                let n = value.numel();
                let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let data = value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .enumerate()
                    .map(|(i, (x, g))| {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        x - lr * mh / (vh.sqrt() + eps)
                    })
                    .collect();
                Tensor::new(value.shape().to_vec(), data).expect("same shape")
            }
        }
    }

    /// Applies one step to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            let current = store.value(name).clone();
            let next = self.update(name, &current, g);
            store.set(name, next)?;
        }
        Ok(())
    }

    /// Step for a single unnamed tensor (outer-level variables).
    pub fn step_tensor(&mut self, value: &Tensor, grad: &Tensor) -> Tensor {
        self.step += 1;
        self.update("", value, grad)
    }
}
