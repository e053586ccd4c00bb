//! Named parameter storage and the Adam optimizer.
//!
//! Parameter values always lie on the `f32` grid (they are rounded after
//! initialisation and after every optimizer step) so checkpoints written as
//! 32-bit floats reload bit-exactly, while all arithmetic runs in `f64`.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> usize {
        assert!(self.index(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value.map(round_f32));
        self.names.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.values[i])
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    /// Overwrites a parameter (rounded to the `f32` grid).
    pub fn set(&mut self, i: usize, value: Tensor) {
        assert_eq!(value.shape(), self.values[i].shape());
        self.values[i] = value.map(round_f32);
    }

    /// Overwrites without rounding; used by finite-difference checks.
    pub fn set_exact(&mut self, i: usize, value: Tensor) {
        assert_eq!(value.shape(), self.values[i].shape());
        self.values[i] = value;
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Leaves for every parameter; only those selected by `scope` track
    /// gradients.
    pub fn bind(&self, g: &mut Graph, scope: &TrainScope) -> Vec<Var> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| g.leaf(v.clone(), scope.tracks(n)))
            .collect()
    }
}

/// Which parameters an optimizer may change.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum TrainScope {
    /// Nothing is trainable (inference / frozen teacher).
    #[default]
    Frozen,
    All,
    /// Whole named tensors plus selected rows of row-masked tensors.
    Subset {
        tensors: Vec<String>,
        rows: BTreeMap<String, Vec<usize>>,
    },
}

impl TrainScope {
    pub fn tracks(&self, name: &str) -> bool {
        match self {
            TrainScope::Frozen => false,
            TrainScope::All => true,
            TrainScope::Subset { tensors, rows } => {
                tensors.iter().any(|t| t == name) || rows.contains_key(name)
            }
        }
    }

    /// Row mask for `name`, when only some rows are trainable.
    pub fn row_mask(&self, name: &str) -> Option<&[usize]> {
        match self {
            TrainScope::Subset { tensors, rows } if !tensors.iter().any(|t| t == name) => {
                rows.get(name).map(Vec::as_slice)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    scope: TrainScope,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, scope: TrainScope, config: AdamConfig) -> Self {
        let m = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        let v = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            scope,
            step: 0,
            m,
            v,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn scope(&self) -> &TrainScope {
        &self.scope
    }

    /// One update from gradients of `vars` (as produced by [`ParamStore::bind`]).
    pub fn step(&mut self, params: &mut ParamStore, vars: &[Var], grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let name = params.names()[i].clone();
            if !self.scope.tracks(&name) {
                continue;
            }
            let Some(g) = grads.get_raw(vars[i]) else {
                continue;
            };
            let mut value = params.value(i).clone();
            let shape = value.shape().to_vec();
            let row_len = if shape.len() >= 2 {
                shape[1..].iter().product()
            } else {
                1
            };
            let allowed: Option<Vec<bool>> = self.scope.row_mask(&name).map(|rows| {
                let mut mask = vec![false; shape[0]];
                for &r in rows {
                    if r < shape[0] {
                        mask[r] = true;
                    }
                }
                mask
            });
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in value.data_mut().iter_mut().enumerate() {
                if let Some(mask) = &allowed {
                    if !mask[j / row_len] {
                        continue;
                    }
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
            params.set(i, value);
        }
    }
}
