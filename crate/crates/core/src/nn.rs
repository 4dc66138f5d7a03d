//! Feed-forward networks: the proxy regressor and the time-conditioned
//! noise predictor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{NdArray, Ops, ParamSet};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
}

/// `num_layers` counts linear layers, so a network with three hidden layers
/// has `num_layers == 4` and `num_layers == 1` is a single affine map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_units: usize,
    pub num_layers: usize,
    pub activation: Activation,
    pub layer_norm: bool,
}

impl MlpSpec {
    pub fn new(in_dim: usize, out_dim: usize, hidden_units: usize, num_layers: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            hidden_units,
            num_layers,
            activation: Activation::Gelu,
            layer_norm: false,
        }
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.hidden_units == 0 || self.num_layers == 0 {
            return Err(Error::invalid(format!("MLP extents must be positive: {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|i| {
                let fan_in = if i == 0 { self.in_dim } else { self.hidden_units };
                let fan_out = if i + 1 == self.num_layers { self.out_dim } else { self.hidden_units };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn num_blocks(&self) -> usize {
        let per_hidden = if self.layer_norm { 4 } else { 2 };
        per_hidden * (self.num_layers - 1) + 2
    }

    /// Kaiming-uniform weights, zero biases, unit norm gains.
    pub fn init(&self, rng: &mut impl Rng, zero_output: bool) -> ParamSet {
        let mut p = ParamSet::new();
        let dims = self.layer_dims();
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let last = i + 1 == dims.len();
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = if last && zero_output {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect()
            };
            p.push(format!("layer{i}.weight"), NdArray::new(fan_in, fan_out, w).expect("positive extents"));
            p.push(format!("layer{i}.bias"), NdArray::zeros(1, fan_out));
            if !last && self.layer_norm {
                p.push(format!("layer{i}.norm.gain"), NdArray::filled(1, fan_out, 1.0));
                p.push(format!("layer{i}.norm.bias"), NdArray::zeros(1, fan_out));
            }
        }
        p
    }
}

fn layer_norm<B: Ops>(b: &B, h: &B::V, gain: &B::V, bias: &B::V) -> B::V {
    let [rows, cols] = b.shape(h);
    let inv = 1.0 / cols as f64;
    let mean = b.scale(&b.sum_cols(h), inv);
    let centered = b.sub(h, &b.broadcast_cols(&mean, cols));
    let var = b.scale(&b.sum_cols(&b.square(&centered)), inv);
    let inv_std = b.powf(&b.offset(&var, LN_EPS), -0.5);
    let normed = b.mul_rows_by(&centered, &inv_std);
    b.add(&b.mul(&normed, &b.broadcast_rows(gain, rows)), &b.broadcast_rows(bias, rows))
}

/// Hidden layers are linear, optional layer norm, then the activation; the
/// output layer is linear.
pub fn mlp_forward<B: Ops>(b: &B, spec: &MlpSpec, params: &[B::V], x: &B::V) -> Result<B::V> {
    let [_, cols] = b.shape(x);
    if cols != spec.in_dim {
        return Err(Error::shape("mlp_forward", format!("input has {cols} columns, network expects {}", spec.in_dim)));
    }
    if params.len() != spec.num_blocks() {
        return Err(Error::shape(
            "mlp_forward",
            format!("{} parameter blocks, network expects {}", params.len(), spec.num_blocks()),
        ));
    }
    let mut h = x.clone();
    let mut at = 0;
    for i in 0..spec.num_layers {
        h = b.linear(&h, &params[at], &params[at + 1]);
        at += 2;
        if i + 1 < spec.num_layers {
            if spec.layer_norm {
                h = layer_norm(b, &h, &params[at], &params[at + 1]);
                at += 2;
            }
            h = match spec.activation {
                Activation::Gelu => b.gelu(&h),
            };
        }
    }
    Ok(h)
}

/// Sinusoidal embedding of a (possibly fractional) diffusion step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub max_t: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize, max_t: usize) -> Self {
        assert!(dim >= 2 && dim.is_multiple_of(2), "embedding width must be even");
        Self { dim, max_t }
    }

    /// Rows of `[sin(τ f_0) .. sin(τ f_{h-1}), cos(τ f_0) .. cos(τ f_{h-1})]`.
    pub fn embed(&self, taus: &[f64]) -> Result<NdArray> {
        if taus.is_empty() {
            return Err(Error::Empty("time embedding"));
        }
        let half = self.dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp())
            .collect();
        let mut out = NdArray::zeros(taus.len(), self.dim);
        for (r, &tau) in taus.iter().enumerate() {
            if !(tau >= 1.0 && tau <= self.max_t as f64) {
                return Err(Error::invalid(format!("diffusion step {tau} outside [1, {}]", self.max_t)));
            }
            let row = out.row_mut(r);
            for (k, f) in freqs.iter().enumerate() {
                row[k] = (tau * f).sin();
                row[half + k] = (tau * f).cos();
            }
        }
        Ok(out)
    }
}

/// `ε̂(x_t, t)`: an MLP over `concat(x_t, embed(t))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseNet {
    pub mlp: MlpSpec,
    pub embedding: TimeEmbedding,
}

impl NoiseNet {
    pub fn new(dim: usize, hidden_units: usize, num_layers: usize, max_t: usize) -> Self {
        let embedding = TimeEmbedding::new(64, max_t);
        let mlp = MlpSpec::new(dim + embedding.dim, dim, hidden_units, num_layers).with_layer_norm(true);
        Self { mlp, embedding }
    }

    pub fn dim(&self) -> usize {
        self.mlp.out_dim
    }

    /// Output layer starts at zero so the untrained predictor returns 0.
    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        self.mlp.init(rng, true)
    }

    /// `taus` holds one step per row of `x`; fractional steps are allowed.
    pub fn forward<B: Ops>(&self, b: &B, params: &[B::V], x: &B::V, taus: &[f64]) -> Result<B::V> {
        let [rows, cols] = b.shape(x);
        if cols != self.dim() {
            return Err(Error::shape("noise_net", format!("input has {cols} columns, expected {}", self.dim())));
        }
        if taus.len() != rows {
            return Err(Error::shape("noise_net", format!("{} steps for {rows} rows", taus.len())));
        }
        let emb = b.constant(self.embedding.embed(taus)?);
        mlp_forward(b, &self.mlp, params, &b.concat_cols(x, &emb))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: serde_json::Value,
    pub names: Vec<String>,
    pub shapes: Vec<[usize; 2]>,
    pub seed: u64,
}

/// Writes `u64 LE header length | JSON header | f64 LE values`.
pub fn save_checkpoint(path: &Path, spec: &impl Serialize, params: &ParamSet, seed: u64) -> Result<()> {
    let header = CheckpointHeader {
        spec: serde_json::to_value(spec)?,
        names: params.names().to_vec(),
        shapes: params.shapes(),
        seed,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in params.flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.names.len() != header.shapes.len() {
        return Err(Error::invalid("checkpoint header has mismatched names and shapes"));
    }
    let mut params = ParamSet::new();
    let mut buf = [0u8; 8];
    for (name, &[rows, cols]) in header.names.iter().zip(&header.shapes) {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(name.clone(), NdArray::new(rows, cols, data)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::invalid("trailing bytes after checkpoint values"));
    }
    Ok((header, params))
}
