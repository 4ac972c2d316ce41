//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, 1) · scale`.
    Normal(f32),
    Constant(f32),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Ordered set of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    /// Fresh parameters initialized from `seed`; entry `i` draws from its
    /// own sub-stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut store = Self::default();
        for (i, spec) in specs.iter().enumerate() {
            let n = spec.shape.iter().product();
            let data = match spec.init {
                Init::Normal(scale) => {
                    let mut rng = SeededRng::derive(seed, i as u64);
                    (0..n).map(|_| rng.normal() * scale).collect()
                }
                Init::Constant(v) => vec![v; n],
            };
            store.names.push(spec.name.clone());
            store.tensors.push(Tensor::from_parts(spec.shape.clone(), data));
        }
        store
    }

    /// Picks the tensors named in `specs` out of `named`, in spec order,
    /// checking every shape.
    pub fn from_named(specs: &[ParamSpec], named: &HashMap<String, Tensor>) -> Result<Self> {
        let mut store = Self::default();
        for spec in specs {
            let t = named.get(&spec.name).ok_or_else(|| {
                Error::ArchitectureMismatch(format!("parameter '{}' missing", spec.name))
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter '{}' has shape {:?}, architecture expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            store.names.push(spec.name.clone());
            store.tensors.push(t.clone());
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.input(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Collects the gradients for bound parameters; missing entries are zero.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// `self = beta·self + (1-beta)·other`.
    pub fn lerp_towards(&mut self, other: &ParamStore, beta: f32) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = beta * *x + (1.0 - beta) * *y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self::for_tensors(config, &params.tensors)
    }

    pub fn for_tensors(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f32) {
        self.step_tensors(&mut params.tensors, grads, lr)
    }

    pub fn step_tensors(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) {
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
