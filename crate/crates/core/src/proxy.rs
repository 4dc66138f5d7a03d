//! Deep-ensemble proxy of the objective and its UCB reward.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{adam_step, AdamConfig, AdamState, Eager, NdArray, Ops, ParamSet, Tape};
use crate::nn::{mlp_forward, MlpSpec};
use crate::{par, rng};

/// A differentiable scalar reward over rows of normalized points.
pub trait RewardModel: Sync {
    /// `[n, d] -> [n, 1]`
    fn reward<B: Ops>(&self, b: &B, x: &B::V) -> Result<B::V>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Softmax of standardized scores.
    Standardized,
    /// Softmax of the raw scores.
    Raw,
}

/// Softmax weights emphasizing high scores; they sum to one.
pub fn compute_weights(ys: &[f64], mode: WeightMode) -> Result<Vec<f64>> {
    if ys.is_empty() {
        return Err(Error::Empty("compute_weights"));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::invalid("non-finite score in compute_weights"));
    }
    let scores: Vec<f64> = match mode {
        WeightMode::Raw => ys.to_vec(),
        WeightMode::Standardized => {
            let (mean, std) = mean_std(ys);
            if std == 0.0 {
                vec![0.0; ys.len()]
            } else {
                ys.iter().map(|y| (y - mean) / std).collect()
            }
        }
    };
    Ok(softmax(&scores))
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub members: usize,
    pub hidden_units: usize,
    pub num_layers: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            members: 5,
            hidden_units: 256,
            num_layers: 4,
            gamma: 1.0,
            epochs: 50,
            lr: 1e-3,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProxyEnsemble {
    pub spec: MlpSpec,
    pub members: Vec<ParamSet>,
    pub gamma: f64,
    /// Standardization of the training targets; predictions are in
    /// standardized units.
    pub y_mean: f64,
    pub y_std: f64,
}

impl ProxyEnsemble {
    pub fn new(dim: usize, cfg: &ProxyConfig, seed: u64) -> Result<Self> {
        if cfg.members == 0 {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        if !(cfg.gamma >= 0.0) {
            return Err(Error::invalid(format!("UCB coefficient must be non-negative, got {}", cfg.gamma)));
        }
        let spec = MlpSpec::new(dim, 1, cfg.hidden_units, cfg.num_layers);
        spec.validate()?;
        let members = (0..cfg.members)
            .map(|k| spec.init(&mut rng::stream(seed, &[rng::tag::PROXY, k as u64, 0]), false))
            .collect();
        Ok(Self {
            spec,
            members,
            gamma: cfg.gamma,
            y_mean: 0.0,
            y_std: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Per-member predictions, each `[n, 1]`.
    pub fn member_outputs<B: Ops>(&self, b: &B, x: &B::V) -> Result<Vec<B::V>> {
        self.members
            .iter()
            .map(|p| mlp_forward(b, &self.spec, &b.lift(p), x))
            .collect()
    }

    /// `(μ, σ, μ + γσ)`, each `[n, 1]`; σ is the population spread.
    pub fn predict_ucb<B: Ops>(&self, b: &B, x: &B::V) -> Result<(B::V, B::V, B::V)> {
        let outs = self.member_outputs(b, x)?;
        let k = outs.len() as f64;
        let mut sum = outs[0].clone();
        for o in &outs[1..] {
            sum = b.add(&sum, o);
        }
        let mu = b.scale(&sum, 1.0 / k);
        let mut ss = b.square(&b.sub(&outs[0], &mu));
        for o in &outs[1..] {
            ss = b.add(&ss, &b.square(&b.sub(o, &mu)));
        }
        let sigma = b.sqrt(&b.scale(&ss, 1.0 / k));
        let r = if self.gamma == 0.0 {
            mu.clone()
        } else {
            b.add(&mu, &b.scale(&sigma, self.gamma))
        };
        Ok((mu, sigma, r))
    }

    pub fn ucb(&self, x: &NdArray) -> Result<Vec<f64>> {
        Ok(self.predict_ucb(&Eager, x)?.2.into_data())
    }

    /// Ensemble mean mapped back to the units of the training targets.
    pub fn predict_mean(&self, x: &NdArray) -> Result<Vec<f64>> {
        let mu = self.predict_ucb(&Eager, x)?.0;
        Ok(mu.data().iter().map(|m| m * self.y_std + self.y_mean).collect())
    }
}

impl RewardModel for ProxyEnsemble {
    fn reward<B: Ops>(&self, b: &B, x: &B::V) -> Result<B::V> {
        if self.gamma == 0.0 {
            let outs = self.member_outputs(b, x)?;
            let mut sum = outs[0].clone();
            for o in &outs[1..] {
                sum = b.add(&sum, o);
            }
            return Ok(b.scale(&sum, 1.0 / outs.len() as f64));
        }
        Ok(self.predict_ucb(b, x)?.2)
    }
}

/// Weighted squared-error fit of one member, `Σ (w_i n)(y_i − f(x_i))² / |batch|`.
fn train_member(
    spec: &MlpSpec,
    params: &mut ParamSet,
    x: &NdArray,
    y: &[f64],
    mult: &[f64],
    cfg: &ProxyConfig,
    seed: u64,
    member: usize,
) -> Result<()> {
    let n = x.rows();
    let mut shuffle = rng::stream(seed, &[rng::tag::PROXY, member as u64, 1]);
    let mut adam = AdamState::new(params, AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..n).collect();
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for idx in order.chunks(bs) {
            let tape = Tape::new();
            let leaves: Vec<_> = params.blocks().iter().map(|p| tape.leaf(p.clone())).collect();
            let xb = tape.constant(x.select_rows(idx));
            let yb = tape.constant(NdArray::column(&idx.iter().map(|&i| y[i]).collect::<Vec<_>>()));
            let wb = tape.constant(NdArray::column(&idx.iter().map(|&i| mult[i]).collect::<Vec<_>>()));
            let pred = mlp_forward(&tape, spec, &leaves, &xb)?;
            let loss = pred.sub(&yb).square().mul(&wb).sum().scale(1.0 / idx.len() as f64);
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    what: format!("proxy member {member}"),
                    detail: format!("loss {lv} at epoch {epoch}"),
                });
            }
            let refs: Vec<_> = leaves.iter().collect();
            let grads = tape.backward(&loss, None, &refs).map_err(|e| Error::Diverged {
                what: format!("proxy member {member}"),
                detail: e.to_string(),
            })?;
            adam_step(params, &grads, &mut adam)?;
        }
    }
    Ok(())
}

/// Fits every member on `(x, y)` with per-point weights (normalized inputs;
/// targets are standardized internally). Members train in parallel.
pub fn train_ensemble(
    ensemble: &mut ProxyEnsemble,
    x: &NdArray,
    y: &[f64],
    weights: &[f64],
    cfg: &ProxyConfig,
    seed: u64,
) -> Result<()> {
    if x.rows() != y.len() || y.len() != weights.len() {
        return Err(Error::shape(
            "train_ensemble",
            format!("{} points, {} scores, {} weights", x.rows(), y.len(), weights.len()),
        ));
    }
    if y.is_empty() {
        return Err(Error::Empty("train_ensemble"));
    }
    let (mean, std) = mean_std(y);
    let std = if std > 0.0 { std } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - mean) / std).collect();
    let n = y.len() as f64;
    let mult: Vec<f64> = weights.iter().map(|w| w * n).collect();
    let spec = ensemble.spec.clone();
    let members = std::mem::take(&mut ensemble.members);
    let trained = par::try_map(members.len(), |k| {
        let mut p = members[k].clone();
        train_member(&spec, &mut p, x, &ys, &mult, cfg, seed, k)?;
        Ok(p)
    })?;
    ensemble.members = trained;
    ensemble.y_mean = mean;
    ensemble.y_std = std;
    Ok(())
}

/// `r(x) = −‖x − c‖² / 2`, summed over coordinates.
#[derive(Clone, Debug)]
pub struct QuadraticReward {
    pub center: Vec<f64>,
}

impl RewardModel for QuadraticReward {
    fn reward<B: Ops>(&self, b: &B, x: &B::V) -> Result<B::V> {
        let [rows, cols] = b.shape(x);
        if cols != self.center.len() {
            return Err(Error::shape("quadratic_reward", format!("{cols} columns vs {}", self.center.len())));
        }
        let c = b.broadcast_rows(&b.constant(NdArray::row_vector(&self.center)), rows);
        Ok(b.scale(&b.sum_cols(&b.square(&b.sub(x, &c))), -0.5))
    }
}

/// The zero reward.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroReward;

impl RewardModel for ZeroReward {
    fn reward<B: Ops>(&self, b: &B, x: &B::V) -> Result<B::V> {
        let rows = b.shape(x)[0];
        Ok(b.constant(NdArray::zeros(rows, 1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_examples() {
        let w = compute_weights(&[2.0; 4], WeightMode::Standardized).unwrap();
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let w = compute_weights(&[0.0, 3f64.ln()], WeightMode::Raw).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        assert!(compute_weights(&[], WeightMode::Raw).is_err());
    }

    #[test]
    fn ucb_of_two_members() {
        let cfg = ProxyConfig {
            members: 2,
            hidden_units: 4,
            num_layers: 1,
            ..ProxyConfig::default()
        };
        let mut e = ProxyEnsemble::new(1, &cfg, 0).unwrap();
        e.members[0].blocks_mut()[0] = NdArray::scalar(0.0);
        e.members[0].blocks_mut()[1] = NdArray::scalar(0.0);
        e.members[1].blocks_mut()[0] = NdArray::scalar(0.0);
        e.members[1].blocks_mut()[1] = NdArray::scalar(2.0);
        let (mu, sigma, r) = e.predict_ucb(&Eager, &NdArray::scalar(0.3)).unwrap();
        assert_eq!((mu.item(), sigma.item(), r.item()), (1.0, 1.0, 2.0));
        e.gamma = 0.0;
        assert_eq!(e.reward(&Eager, &NdArray::scalar(0.3)).unwrap().item(), 1.0);
    }

    #[test]
    fn overfits_a_single_point() {
        let cfg = ProxyConfig {
            members: 2,
            hidden_units: 16,
            num_layers: 3,
            epochs: 300,
            lr: 1e-2,
            ..ProxyConfig::default()
        };
        let mut e = ProxyEnsemble::new(2, &cfg, 1).unwrap();
        let x = NdArray::from_rows(&[[0.2, -0.4]]).unwrap();
        train_ensemble(&mut e, &x, &[3.5], &[1.0], &cfg, 1).unwrap();
        // Standardized target of a single point is 0.
        for o in e.member_outputs(&Eager, &x).unwrap() {
            assert!(o.item().abs() < 1e-2, "{o:?}");
        }
    }
}
