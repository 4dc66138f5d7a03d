//! Relative-trajectory-balance fine-tuning of a copy of the prior toward
//! `p_θ(x) exp(β r(x)) / Z`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, NoisePredictor, Trajectories};
use crate::error::{Error, Result};
use crate::nd::{adam_step, AdamConfig, AdamState, Eager, NdArray, Ops, ParamSet, Tape};
use crate::proxy::{compute_weights, RewardModel, WeightMode};
use crate::{par, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Optimizer steps, each on a fresh minibatch of trajectories.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub logz_lr: f64,
    pub off_policy_prob: f64,
    /// Before the first step, set logZ to the value minimizing the loss on
    /// the first batch.
    pub warm_start_log_z: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            batch_size: 256,
            lr: 1e-4,
            logz_lr: 1e-2,
            off_policy_prob: 0.5,
            warm_start_log_z: true,
        }
    }
}

/// The fine-tuned sampler `p_ψ` with its log-partition estimate.
#[derive(Clone, Debug)]
pub struct PosteriorSampler<P> {
    pub model: DiffusionModel<P>,
    pub log_z: f64,
    pub beta: f64,
}

impl<P: NoisePredictor + Clone> PosteriorSampler<P> {
    /// `ψ ← θ`, `log Z ← 0`.
    pub fn from_prior(prior: &DiffusionModel<P>, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::invalid(format!("inverse temperature must be positive, got {beta}")));
        }
        Ok(Self {
            model: prior.clone(),
            log_z: 0.0,
            beta,
        })
    }
}

/// Stored points with their current UCB scores.
#[derive(Clone, Debug)]
pub struct ReplayView<'a> {
    pub x: &'a NdArray,
    pub scores: &'a [f64],
}

/// Indices drawn with replacement, with probability softmax of the
/// standardized scores.
pub fn prioritized_sample(view: &ReplayView<'_>, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if view.scores.is_empty() {
        return Err(Error::Empty("prioritized_sample"));
    }
    let w = compute_weights(view.scores, WeightMode::Standardized)?;
    let dist = WeightedIndex::new(&w).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Per-chain residual `log Z + log p_ψ(τ) − β r(x_0) − log p_θ(τ)`, `[n, 1]`.
pub fn rtb_residual<B: Ops, P: NoisePredictor>(
    b: &B,
    psi: &DiffusionModel<P>,
    psi_params: &[B::V],
    log_z: &B::V,
    traj: &Trajectories,
    beta_reward: &[f64],
    prior_logp: &[f64],
) -> Result<B::V> {
    let n = traj.len();
    if beta_reward.len() != n || prior_logp.len() != n {
        return Err(Error::shape(
            "rtb_loss",
            format!("{n} trajectories, {} rewards, {} prior densities", beta_reward.len(), prior_logp.len()),
        ));
    }
    let lp = psi.traj_logprob(b, psi_params, traj)?;
    let offset: Vec<f64> = beta_reward.iter().zip(prior_logp).map(|(r, p)| r + p).collect();
    let z = b.broadcast_rows(log_z, n);
    Ok(b.sub(&b.add(&z, &lp), &b.constant(NdArray::column(&offset))))
}

/// Mean squared residual over the batch.
pub fn rtb_loss<B: Ops, P: NoisePredictor>(
    b: &B,
    psi: &DiffusionModel<P>,
    psi_params: &[B::V],
    log_z: &B::V,
    traj: &Trajectories,
    beta_reward: &[f64],
    prior_logp: &[f64],
) -> Result<B::V> {
    let res = rtb_residual(b, psi, psi_params, log_z, traj, beta_reward, prior_logp)?;
    Ok(b.scale(&b.sum(&b.square(&res)), 1.0 / traj.len() as f64))
}

/// Fixed inputs of the loss for one batch of trajectories.
pub struct RtbBatch {
    pub traj: Trajectories,
    pub beta_reward: Vec<f64>,
    pub prior_logp: Vec<f64>,
}

impl RtbBatch {
    pub fn new<P: NoisePredictor, R: RewardModel>(
        traj: Trajectories,
        prior: &DiffusionModel<P>,
        reward: &R,
        beta: f64,
    ) -> Result<Self> {
        let r = reward.reward(&Eager, traj.x0())?;
        let beta_reward: Vec<f64> = r.data().iter().map(|v| beta * v).collect();
        let prior_logp = prior.traj_logprob(&Eager, prior.params.blocks(), &traj)?.into_data();
        if beta_reward.iter().chain(&prior_logp).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "rtb_loss input",
                node: 0,
            });
        }
        Ok(Self {
            traj,
            beta_reward,
            prior_logp,
        })
    }

    /// Per-trajectory residuals at the sampler's current parameters.
    pub fn residuals<P: NoisePredictor>(&self, sampler: &PosteriorSampler<P>) -> Result<Vec<f64>> {
        let lz = NdArray::scalar(sampler.log_z);
        Ok(rtb_residual(
            &Eager,
            &sampler.model,
            sampler.model.params.blocks(),
            &lz,
            &self.traj,
            &self.beta_reward,
            &self.prior_logp,
        )?
        .into_data())
    }

    pub fn loss<P: NoisePredictor>(&self, sampler: &PosteriorSampler<P>) -> Result<f64> {
        let lz = NdArray::scalar(sampler.log_z);
        Ok(rtb_loss(
            &Eager,
            &sampler.model,
            sampler.model.params.blocks(),
            &lz,
            &self.traj,
            &self.beta_reward,
            &self.prior_logp,
        )?
        .item())
    }
}

const GRAD_CHUNK: usize = 32;

/// Loss and gradients (network blocks, then log Z), accumulated over chunks
/// of chains.
pub fn rtb_loss_and_grad<P: NoisePredictor>(sampler: &PosteriorSampler<P>, batch: &RtbBatch) -> Result<(f64, Vec<NdArray>, f64)> {
    let n = batch.traj.len();
    let inv = 1.0 / n as f64;
    let parts = par::try_map_chunks(n, GRAD_CHUNK, |start, len| {
        let tape = Tape::new();
        let leaves: Vec<_> = sampler.model.params.blocks().iter().map(|p| tape.leaf(p.clone())).collect();
        let lz = tape.leaf(NdArray::scalar(sampler.log_z));
        let traj = batch.traj.slice(start, len);
        let res = rtb_residual(
            &tape,
            &sampler.model,
            &leaves,
            &lz,
            &traj,
            &batch.beta_reward[start..start + len],
            &batch.prior_logp[start..start + len],
        )?;
        let loss = res.square().sum().scale(inv);
        let mut refs: Vec<_> = leaves.iter().collect();
        refs.push(&lz);
        let mut grads = tape.backward(&loss, None, &refs)?;
        let gz = grads.pop().expect("log Z gradient").item();
        Ok((loss.value().item(), grads, gz))
    })?;
    let mut it = parts.into_iter();
    let (mut loss, mut grads, mut gz) = it.next().ok_or(Error::Empty("rtb batch"))?;
    for (l, g, z) in it {
        loss += l;
        gz += z;
        for (a, b) in grads.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    Ok((loss, grads, gz))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    pub on_policy: usize,
    pub off_policy: usize,
}

impl FinetuneReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fine-tunes `sampler` in place. Each iteration draws either fresh
/// on-policy chains from `p_ψ` or, with probability `off_policy_prob`,
/// re-noised replay points chosen by reward priority.
pub fn finetune<P, R>(
    sampler: &mut PosteriorSampler<P>,
    prior: &DiffusionModel<P>,
    reward: &R,
    replay: Option<&ReplayView<'_>>,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport>
where
    P: NoisePredictor,
    R: RewardModel,
{
    if cfg.batch_size == 0 {
        return Err(Error::invalid("fine-tuning batch size must be positive"));
    }
    let mut adam = AdamState::new(&sampler.model.params, AdamConfig::with_lr(cfg.lr));
    let mut z_params = ParamSet::new();
    z_params.push("logZ", NdArray::scalar(sampler.log_z));
    let mut z_adam = AdamState::new(&z_params, AdamConfig::with_lr(cfg.logz_lr));
    let mut report = FinetuneReport::default();
    for it in 0..cfg.iterations {
        let mut r = rng::stream(seed, &[rng::tag::FINETUNE, it as u64]);
        let chain_seed: u64 = r.random();
        let off = replay.is_some() && r.random::<f64>() < cfg.off_policy_prob;
        let traj = if off {
            let view = replay.expect("checked above");
            let idx = prioritized_sample(view, cfg.batch_size, &mut r)?;
            sampler.model.noise_trajectory(&view.x.select_rows(&idx), chain_seed)?
        } else {
            sampler.model.sample(cfg.batch_size, chain_seed)?
        };
        if off {
            report.off_policy += 1;
        } else {
            report.on_policy += 1;
        }
        let batch = RtbBatch::new(traj, prior, reward, sampler.beta)?;
        if it == 0 && cfg.warm_start_log_z {
            let res = batch.residuals(sampler)?;
            let shift = res.iter().sum::<f64>() / res.len() as f64;
            if shift.is_finite() {
                sampler.log_z -= shift;
                z_params.blocks_mut()[0] = NdArray::scalar(sampler.log_z);
            }
        }
        let (loss, grads, gz) = rtb_loss_and_grad(sampler, &batch)?;
        if !loss.is_finite() {
            let tail: Vec<f64> = report.losses.iter().rev().take(5).rev().copied().collect();
            return Err(Error::Diverged {
                what: "posterior fine-tuning".into(),
                detail: format!("loss {loss} at iteration {it}; previous losses {tail:?}"),
            });
        }
        log::trace!(
            "rtb iter {it} off {off} loss {loss:.3e} beta*r [{:.2}, {:.2}] max |x0| {:.2}",
            batch.beta_reward.iter().copied().fold(f64::INFINITY, f64::min),
            batch.beta_reward.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            batch.traj.x0().data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        );
        report.losses.push(loss);
        if !sampler.model.params.is_empty() {
            adam_step(&mut sampler.model.params, &grads, &mut adam)?;
        }
        adam_step(&mut z_params, &[NdArray::scalar(gz)], &mut z_adam)?;
        sampler.log_z = z_params.get(0).item();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, AnalyticGaussianEps, NoiseSchedule};
    use crate::proxy::ZeroReward;

    fn one_step_model() -> DiffusionModel<AnalyticGaussianEps> {
        DiffusionModel::new(make_schedule(1, 0.1, 0.1).unwrap(), AnalyticGaussianEps::centered(1, 0.5), 0)
    }

    #[test]
    fn identical_models_with_zero_reward_have_zero_loss() {
        let prior = DiffusionModel::new(NoiseSchedule::linear(30).unwrap(), AnalyticGaussianEps::centered(2, 0.5), 0);
        let sampler = PosteriorSampler::from_prior(&prior, 3.0).unwrap();
        let traj = prior.sample(16, 1).unwrap();
        let batch = RtbBatch::new(traj, &prior, &ZeroReward, sampler.beta).unwrap();
        assert!(batch.loss(&sampler).unwrap().abs() < 1e-20);
    }

    #[test]
    fn residual_is_controlled_by_log_z() {
        let prior = one_step_model();
        let mut sampler = PosteriorSampler::from_prior(&prior, 1.0).unwrap();
        let traj = prior.sample(1, 2).unwrap();
        let batch = RtbBatch::new(traj, &prior, &ZeroReward, 1.0).unwrap();
        sampler.log_z = 2.0;
        assert!((batch.loss(&sampler).unwrap() - 4.0).abs() < 1e-12);
        let (_, _, gz) = rtb_loss_and_grad(&sampler, &batch).unwrap();
        assert!((gz - 4.0).abs() < 1e-12);
    }

    #[test]
    fn prioritized_sampling_is_seeded() {
        let x = NdArray::zeros(3, 1);
        let scores = [0.0, 1.0, 2.0];
        let view = ReplayView { x: &x, scores: &scores };
        let a = prioritized_sample(&view, 20, &mut rng::stream(4, &[])).unwrap();
        let b = prioritized_sample(&view, 20, &mut rng::stream(4, &[])).unwrap();
        assert_eq!(a, b);
        let empty = ReplayView { x: &x, scores: &[] };
        assert!(prioritized_sample(&empty, 1, &mut rng::stream(4, &[])).is_err());
    }
}
