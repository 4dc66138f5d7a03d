use serde::{Deserialize, Serialize};

use super::array::NdArray;
use crate::error::{Error, Result};

/// Named parameter blocks of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    blocks: Vec<NdArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, block: NdArray) {
        self.names.push(name.into());
        self.blocks.push(block);
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn blocks(&self) -> &[NdArray] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [NdArray] {
        &mut self.blocks
    }

    pub fn get(&self, i: usize) -> &NdArray {
        &self.blocks[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&NdArray> {
        self.names.iter().position(|n| n == name).map(|i| &self.blocks[i])
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(NdArray::len).sum()
    }

    pub fn shapes(&self) -> Vec<[usize; 2]> {
        self.blocks.iter().map(NdArray::shape).collect()
    }

    /// Concatenation of all blocks in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten) for an identically shaped set.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::shape(
                "load_flat",
                format!("{} values for {} parameters", values.len(), self.num_values()),
            ));
        }
        let mut at = 0;
        for b in &mut self.blocks {
            let n = b.len();
            b.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<NdArray>,
    pub v: Vec<NdArray>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.blocks().iter().map(|b| NdArray::zeros(b.rows(), b.cols())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            config,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ParamSet, grads: &[NdArray], state: &mut AdamState) -> Result<()> {
    let cfg = state.config;
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameter blocks", grads.len(), params.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.blocks[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient {:?} for block `{}` of shape {:?}", g.shape(), params.names[i], params.blocks[i].shape()),
            ));
        }
        if g.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFiniteGradient(params.names[i].clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.b1.powi(t);
    let c2 = 1.0 - cfg.b2.powi(t);
    for ((p, g), (m, v)) in params
        .blocks
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.b1 * *m + (1.0 - cfg.b1) * g;
            *v = cfg.b2 * *v + (1.0 - cfg.b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
