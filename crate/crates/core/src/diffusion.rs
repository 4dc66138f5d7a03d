//! DDPM prior: schedule, weighted training, ancestral sampling, forward
//! noising and trajectory log-densities.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{adam_step, AdamConfig, AdamState, Eager, NdArray, Ops, ParamSet, Tape};
use crate::nn::NoiseNet;
use crate::rng::{self, StreamRng};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `σ_t² = β_t`
    Beta,
    /// `σ_t² = β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`
    BetaTilde,
}

/// Linear β schedule. Steps are indexed `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
    variance: ReverseVariance,
    /// Slopes of the monotone cubic through `(i/T, log ᾱ_i)`, `i = 0..=T`.
    slopes: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta, ReverseVariance::Beta)
}

impl NoiseSchedule {
    /// Standard 1000-step endpoints rescaled to `steps`; requires `steps > 20`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps <= 20 {
            return Err(Error::invalid(format!("rescaled linear schedule needs more than 20 steps, got {steps}")));
        }
        let scale = 1000.0 / steps as f64;
        make_schedule(steps, 1e-4 * scale, 0.02 * scale)
    }

    pub fn from_betas(beta: Vec<f64>, variance: ReverseVariance) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut s = Self {
            steps: beta.len(),
            beta,
            alpha,
            alpha_bar,
            sigma2: Vec::new(),
            variance,
            slopes: Vec::new(),
        };
        s.sigma2 = s.compute_sigma2(variance);
        s.slopes = s.compute_slopes();
        Ok(s)
    }

    pub fn with_variance(mut self, variance: ReverseVariance) -> Self {
        self.variance = variance;
        self.sigma2 = self.compute_sigma2(variance);
        self
    }

    fn compute_sigma2(&self, variance: ReverseVariance) -> Vec<f64> {
        match variance {
            ReverseVariance::Beta => self.beta.clone(),
            ReverseVariance::BetaTilde => (0..self.steps)
                .map(|i| {
                    if i == 0 {
                        // The posterior variance vanishes at the first step.
                        self.beta[0]
                    } else {
                        self.beta[i] * (1.0 - self.alpha_bar[i - 1]) / (1.0 - self.alpha_bar[i])
                    }
                })
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn variance(&self) -> ReverseVariance {
        self.variance
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(1/√α_t, β_t / √(1 − ᾱ_t))`: the reverse mean is
    /// `a (x_t − b ε̂)`.
    pub fn mean_coefs(&self, t: usize) -> (f64, f64) {
        (1.0 / self.alpha(t).sqrt(), self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt())
    }

    fn log_ab_node(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.alpha_bar[i - 1].ln()
        }
    }

    fn compute_slopes(&self) -> Vec<f64> {
        let t = self.steps;
        let h = 1.0 / t as f64;
        let delta: Vec<f64> = (0..t).map(|i| (self.log_ab_node(i + 1) - self.log_ab_node(i)) / h).collect();
        let mut m = vec![0.0; t + 1];
        m[0] = delta[0];
        m[t] = delta[t - 1];
        for i in 1..t {
            let (a, b) = (delta[i - 1], delta[i]);
            m[i] = if a * b > 0.0 { 2.0 / (1.0 / a + 1.0 / b) } else { 0.0 };
        }
        m
    }

    /// Continuous `(log ᾱ(s), d log ᾱ / ds)` for `s ∈ [0, 1]`, a monotone
    /// cubic through the discrete nodes `s = i/T`.
    pub fn log_alpha_bar_cont(&self, s: f64) -> (f64, f64) {
        let t = self.steps;
        let h = 1.0 / t as f64;
        let s = s.clamp(0.0, 1.0);
        let i = ((s / h).floor() as usize).min(t - 1);
        let u = (s - i as f64 * h) / h;
        let (y0, y1) = (self.log_ab_node(i), self.log_ab_node(i + 1));
        let (m0, m1) = (self.slopes[i], self.slopes[i + 1]);
        let (u2, u3) = (u * u, u * u * u);
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        let val = h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1;
        let d00 = 6.0 * u2 - 6.0 * u;
        let d10 = 3.0 * u2 - 4.0 * u + 1.0;
        let d01 = -6.0 * u2 + 6.0 * u;
        let d11 = 3.0 * u2 - 2.0 * u;
        let der = (d00 * y0 + d01 * y1) / h + d10 * m0 + d11 * m1;
        (val, der)
    }

    /// `ᾱ` at a possibly fractional step `tau ∈ [0, T]`; exact on integers.
    pub fn alpha_bar_at(&self, tau: f64) -> f64 {
        if tau.fract() == 0.0 && tau >= 1.0 && tau <= self.steps as f64 {
            return self.alpha_bar(tau as usize);
        }
        self.log_alpha_bar_cont(tau / self.steps as f64).0.exp()
    }

    /// Continuous-time `β(s) = −d log ᾱ / ds`.
    pub fn beta_cont(&self, s: f64) -> f64 {
        -self.log_alpha_bar_cont(s).1
    }
}

/// Noise prediction `ε̂(x, τ)` with parameters held outside.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;
    fn init_params(&self, rng: &mut StreamRng) -> ParamSet;
    /// `taus` gives one (possibly fractional) step per row.
    fn eps<B: Ops>(&self, b: &B, params: &[B::V], x: &B::V, taus: &[f64], sched: &NoiseSchedule) -> Result<B::V>;
}

impl NoisePredictor for NoiseNet {
    fn dim(&self) -> usize {
        NoiseNet::dim(self)
    }

    fn init_params(&self, rng: &mut StreamRng) -> ParamSet {
        self.init(rng)
    }

    fn eps<B: Ops>(&self, b: &B, params: &[B::V], x: &B::V, taus: &[f64], _sched: &NoiseSchedule) -> Result<B::V> {
        self.forward(b, params, x, taus)
    }
}

/// Exact noise predictor of the data law `N(mean, s² I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticGaussianEps {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl AnalyticGaussianEps {
    pub fn centered(dim: usize, std: f64) -> Self {
        Self {
            mean: vec![0.0; dim],
            std,
        }
    }

    /// Weighted per-dimension mean and pooled standard deviation of the rows
    /// of `x`, with the deviation floored at `min_std`.
    pub fn fit(x: &NdArray, weights: Option<&[f64]>, min_std: f64) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n == 0 {
            return Err(Error::Empty("fit data"));
        }
        let w: Vec<f64> = match weights {
            Some(w) if w.len() == n => {
                let total: f64 = w.iter().sum();
                if !(total > 0.0 && total.is_finite()) {
                    return Err(Error::invalid("fit weights must have a positive finite sum"));
                }
                w.iter().map(|v| v / total).collect()
            }
            Some(w) => return Err(Error::shape("gaussian_fit", format!("{} weights for {n} rows", w.len()))),
            None => vec![1.0 / n as f64; n],
        };
        let mut mean = vec![0.0; d];
        for (row, wi) in x.iter_rows().zip(&w) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += wi * v;
            }
        }
        let mut var = 0.0;
        for (row, wi) in x.iter_rows().zip(&w) {
            var += wi * row.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
        }
        let std = (var / d as f64).sqrt().max(min_std);
        Ok(Self { mean, std })
    }

    /// `log N(x; mean, s² I)`.
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let v = self.std * self.std;
        x.iter().zip(&self.mean).map(|(&xi, &m)| crate::nd::kernels::normal_logpdf(xi, m, v)).sum()
    }
}

impl NoisePredictor for AnalyticGaussianEps {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn init_params(&self, _rng: &mut StreamRng) -> ParamSet {
        ParamSet::new()
    }

    fn eps<B: Ops>(&self, b: &B, _params: &[B::V], x: &B::V, taus: &[f64], sched: &NoiseSchedule) -> Result<B::V> {
        let [rows, cols] = b.shape(x);
        if cols != self.mean.len() || taus.len() != rows {
            return Err(Error::shape("analytic_eps", format!("x {:?} with {} steps", [rows, cols], taus.len())));
        }
        let s2 = self.std * self.std;
        let mut coef = Vec::with_capacity(rows);
        let mut shift = NdArray::zeros(rows, cols);
        for (r, &tau) in taus.iter().enumerate() {
            let ab = sched.alpha_bar_at(tau);
            coef.push((1.0 - ab).sqrt() / (ab * s2 + 1.0 - ab));
            for (o, m) in shift.row_mut(r).iter_mut().zip(&self.mean) {
                *o = ab.sqrt() * m;
            }
        }
        let centered = b.sub(x, &b.constant(shift));
        Ok(b.mul_rows_by(&centered, &b.constant(NdArray::column(&coef))))
    }
}

/// Analytic base plus a trainable correction whose output starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualEps {
    pub base: AnalyticGaussianEps,
    pub correction: NoiseNet,
}

impl ResidualEps {
    /// Gaussian base fitted to the weighted data (deviation floored at
    /// `min_std`) with an untrained correction network.
    pub fn fitted(x: &NdArray, weights: Option<&[f64]>, min_std: f64, hidden: usize, layers: usize, steps: usize) -> Result<Self> {
        Ok(Self {
            base: AnalyticGaussianEps::fit(x, weights, min_std)?,
            correction: NoiseNet::new(x.cols(), hidden, layers, steps),
        })
    }
}

impl NoisePredictor for ResidualEps {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn init_params(&self, rng: &mut StreamRng) -> ParamSet {
        self.correction.init(rng)
    }

    fn eps<B: Ops>(&self, b: &B, params: &[B::V], x: &B::V, taus: &[f64], sched: &NoiseSchedule) -> Result<B::V> {
        let base = self.base.eps(b, &[], x, taus, sched)?;
        Ok(b.add(&base, &self.correction.forward(b, params, x, taus)?))
    }
}

/// A noise predictor, its parameters and its schedule.
#[derive(Clone, Debug)]
pub struct DiffusionModel<P> {
    pub schedule: NoiseSchedule,
    pub net: P,
    pub params: ParamSet,
}

/// A batch of denoising chains. `states[0]` is `x_T`, `states[T]` is `x_0`;
/// `step_logps[k]` holds the log-density of `states[k] -> states[k+1]`.
#[derive(Clone, Debug)]
pub struct Trajectories {
    pub states: Vec<NdArray>,
    pub logp_prior_t: Vec<f64>,
    pub step_logps: Vec<Vec<f64>>,
}

impl Trajectories {
    pub fn len(&self) -> usize {
        self.logp_prior_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_prior_t.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn x0(&self) -> &NdArray {
        self.states.last().expect("at least one state")
    }

    /// `log p_T(x_T) + Σ step log-densities`, per chain.
    pub fn total_logp(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.logp_prior_t[i] + self.step_logps.iter().map(|s| s[i]).sum::<f64>())
            .collect()
    }

    /// Chains `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            states: self.states.iter().map(|s| s.slice_rows(start, len)).collect(),
            logp_prior_t: self.logp_prior_t[start..start + len].to_vec(),
            step_logps: self.step_logps.iter().map(|s| s[start..start + len].to_vec()).collect(),
        }
    }

    pub fn concat(parts: &[Trajectories]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("trajectory concat"))?;
        let steps = first.states.len();
        let states = (0..steps)
            .map(|k| NdArray::vstack(&parts.iter().map(|p| p.states[k].clone()).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(Self {
            states,
            logp_prior_t: parts.iter().flat_map(|p| p.logp_prior_t.iter().copied()).collect(),
            step_logps: (0..steps - 1)
                .map(|k| parts.iter().flat_map(|p| p.step_logps[k].iter().copied()).collect())
                .collect(),
        })
    }
}

fn std_normal_logpdf_rows(x: &NdArray) -> Vec<f64> {
    let c = -0.5 * (2.0 * PI).ln() * x.cols() as f64;
    x.iter_rows().map(|r| c - 0.5 * r.iter().map(|v| v * v).sum::<f64>()).collect()
}

fn gaussian_row_logpdf(diff: &[f64], var: f64) -> f64 {
    let d = diff.len() as f64;
    -0.5 * diff.iter().map(|v| v * v).sum::<f64>() / var - 0.5 * d * (2.0 * PI * var).ln()
}

const CHAIN_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Decay of an exponential moving average of the parameters, which
    /// replaces the last iterate when training ends.
    pub ema: Option<f64>,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_size: 256,
            ema: None,
        }
    }
}

impl<P: NoisePredictor> DiffusionModel<P> {
    pub fn new(schedule: NoiseSchedule, net: P, seed: u64) -> Self {
        let params = net.init_params(&mut rng::stream(seed, &[rng::tag::INIT_PARAMS]));
        Self { schedule, net, params }
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn eps<B: Ops>(&self, b: &B, params: &[B::V], x: &B::V, taus: &[f64]) -> Result<B::V> {
        self.net.eps(b, params, x, taus, &self.schedule)
    }

    /// Reverse-kernel mean `μ(x_t, t)` for every row.
    fn reverse_mean(&self, x: &NdArray, t: usize) -> Result<NdArray> {
        let taus = vec![t as f64; x.rows()];
        let eps = self.eps(&Eager, self.params.blocks(), x, &taus)?;
        let (a, b) = self.schedule.mean_coefs(t);
        Ok(x.zip_map(&eps, |xv, ev| a * (xv - b * ev)))
    }

    /// Ancestral sampling; chain `i` draws from its own stream `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Trajectories> {
        if n == 0 {
            return Err(Error::invalid("sample needs n >= 1"));
        }
        let parts = par::try_map_chunks(n, CHAIN_CHUNK, |start, len| self.sample_chunk(start, len, seed))?;
        Trajectories::concat(&parts)
    }

    fn sample_chunk(&self, start: usize, len: usize, seed: u64) -> Result<Trajectories> {
        let d = self.dim();
        let steps = self.steps();
        let mut rngs: Vec<StreamRng> = (start..start + len).map(|i| rng::stream(seed, &[i as u64])).collect();
        let noise = |rngs: &mut [StreamRng]| {
            let mut z = NdArray::zeros(len, d);
            for (r, g) in rngs.iter_mut().enumerate() {
                for v in z.row_mut(r) {
                    *v = g.sample(StandardNormal);
                }
            }
            z
        };
        let xt = noise(&mut rngs);
        let logp_prior_t = std_normal_logpdf_rows(&xt);
        let mut states = vec![xt];
        let mut step_logps = Vec::with_capacity(steps);
        for t in (1..=steps).rev() {
            let mu = self.reverse_mean(states.last().unwrap(), t)?;
            let z = noise(&mut rngs);
            let sd = self.schedule.sigma2(t).sqrt();
            let next = mu.zip_map(&z, |m, zv| m + sd * zv);
            step_logps.push(
                z.iter_rows()
                    .map(|zr| gaussian_row_logpdf(&zr.iter().map(|v| v * sd).collect::<Vec<_>>(), sd * sd))
                    .collect(),
            );
            if !next.is_finite() {
                return Err(Error::Diverged {
                    what: "ancestral sampling".into(),
                    detail: format!("non-finite state at step {t}"),
                });
            }
            states.push(next);
        }
        Ok(Trajectories {
            states,
            logp_prior_t,
            step_logps,
        })
    }

    /// Forward-noises `x0` through `q(x_t | x_{t−1})`, then scores each
    /// transition under this model's reverse kernels.
    pub fn noise_trajectory(&self, x0: &NdArray, seed: u64) -> Result<Trajectories> {
        let n = x0.rows();
        let parts = par::try_map_chunks(n, CHAIN_CHUNK, |start, len| {
            let d = self.dim();
            let steps = self.steps();
            let mut rngs: Vec<StreamRng> = (start..start + len).map(|i| rng::stream(seed, &[i as u64])).collect();
            let mut forward = vec![x0.slice_rows(start, len)];
            for t in 1..=steps {
                let prev = forward.last().unwrap();
                let (sa, sb) = (self.schedule.alpha(t).sqrt(), self.schedule.beta(t).sqrt());
                let mut next = NdArray::zeros(len, d);
                for (r, g) in rngs.iter_mut().enumerate() {
                    for (o, &p) in next.row_mut(r).iter_mut().zip(prev.row(r)) {
                        let z: f64 = g.sample(StandardNormal);
                        *o = sa * p + sb * z;
                    }
                }
                forward.push(next);
            }
            forward.reverse();
            self.score_states(forward)
        })?;
        Trajectories::concat(&parts)
    }

    /// Builds a trajectory record for given states `x_T .. x_0`.
    pub fn score_states(&self, states: Vec<NdArray>) -> Result<Trajectories> {
        let steps = self.steps();
        if states.len() != steps + 1 {
            return Err(Error::shape("score_states", format!("{} states for {steps} steps", states.len())));
        }
        let logp_prior_t = std_normal_logpdf_rows(&states[0]);
        let mut step_logps = Vec::with_capacity(steps);
        for (k, t) in (1..=steps).rev().enumerate() {
            let mu = self.reverse_mean(&states[k], t)?;
            let diff = states[k + 1].zip_map(&mu, |a, b| a - b);
            let var = self.schedule.sigma2(t);
            step_logps.push(diff.iter_rows().map(|r| gaussian_row_logpdf(r, var)).collect());
        }
        Ok(Trajectories {
            states,
            logp_prior_t,
            step_logps,
        })
    }

    /// Per-chain `log p(x_{0:T})` as an `[n, 1]` value, differentiable in
    /// `params` when recorded on a tape.
    pub fn traj_logprob<B: Ops>(&self, b: &B, params: &[B::V], traj: &Trajectories) -> Result<B::V> {
        let steps = self.steps();
        if traj.states.len() != steps + 1 {
            return Err(Error::shape(
                "traj_logprob",
                format!("trajectory has {} states, model has {steps} steps", traj.states.len()),
            ));
        }
        let n = traj.len();
        let d = self.dim();
        if traj.states[0].cols() != d {
            return Err(Error::shape("traj_logprob", format!("{} columns vs model dim {d}", traj.states[0].cols())));
        }
        let xt = NdArray::vstack(&traj.states[..steps])?;
        let target = NdArray::vstack(&traj.states[1..])?;
        let mut taus = Vec::with_capacity(n * steps);
        let mut ca = Vec::with_capacity(n * steps);
        let mut cb = Vec::with_capacity(n * steps);
        let mut scale = Vec::with_capacity(n * steps);
        let mut konst = Vec::with_capacity(n * steps);
        for t in (1..=steps).rev() {
            let (a, bc) = self.schedule.mean_coefs(t);
            let var = self.schedule.sigma2(t);
            for _ in 0..n {
                taus.push(t as f64);
                ca.push(a);
                cb.push(-a * bc);
                scale.push(-0.5 / var);
                konst.push(-0.5 * d as f64 * (2.0 * PI * var).ln());
            }
        }
        let xv = b.constant(xt.clone());
        let eps = self.eps(b, params, &xv, &taus)?;
        // μ = a x_t − a b ε̂, so the residual is (target − a x_t) + a b ε̂.
        let mut fixed = target;
        for (r, a) in ca.iter().enumerate() {
            for (o, xv) in fixed.row_mut(r).iter_mut().zip(xt.row(r)) {
                *o -= a * xv;
            }
        }
        let diff = b.sub(&b.constant(fixed), &b.mul_rows_by(&eps, &b.constant(NdArray::column(&cb))));
        let sq = b.sum_cols(&b.square(&diff));
        let lp = b.add(
            &b.mul(&sq, &b.constant(NdArray::column(&scale))),
            &b.constant(NdArray::column(&konst)),
        );
        let per_chain = b.reshape(&b.sum_rows(&b.reshape(&lp, steps, n)), n, 1);
        Ok(b.add(&per_chain, &b.constant(NdArray::column(&traj.logp_prior_t))))
    }

    /// Weighted denoising loss of one minibatch, `Σ m_i ‖ε − ε̂‖² / |batch|`.
    fn batch_loss(
        &self,
        tape: &Tape,
        leaves: &[crate::nd::Var],
        x0: &NdArray,
        mult: &[f64],
        rng: &mut StreamRng,
    ) -> Result<crate::nd::Var> {
        let (n, d) = (x0.rows(), x0.cols());
        let steps = self.steps();
        let mut taus = Vec::with_capacity(n);
        let mut eps = NdArray::zeros(n, d);
        let mut xt = NdArray::zeros(n, d);
        for i in 0..n {
            let t = rng.random_range(1..=steps);
            taus.push(t as f64);
            let ab = self.schedule.alpha_bar(t);
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                eps.set(i, j, e);
                xt.set(i, j, sa * x0.get(i, j) + sb * e);
            }
        }
        let pred = self.eps(tape, leaves, &tape.constant(xt), &taus)?;
        let err = tape.constant(eps).sub(&pred).square().sum_cols();
        Ok(err.mul(&tape.constant(NdArray::column(mult))).sum().scale(1.0 / n as f64))
    }

    /// Minimizes the weighted denoising objective over `x` (normalized
    /// coordinates). `weights = None` trains unweighted. Returns the mean
    /// minibatch loss of each epoch.
    pub fn train(&mut self, x: &NdArray, weights: Option<&[f64]>, cfg: &PriorTrainConfig, seed: u64) -> Result<Vec<f64>> {
        let n = x.rows();
        if x.cols() != self.dim() {
            return Err(Error::shape("train_prior", format!("{} columns vs model dim {}", x.cols(), self.dim())));
        }
        let mult: Vec<f64> = match weights {
            Some(w) if w.len() == n => w.iter().map(|v| v * n as f64).collect(),
            Some(w) => return Err(Error::shape("train_prior", format!("{} weights for {n} points", w.len()))),
            None => vec![1.0; n],
        };
        let mut r = rng::stream(seed, &[rng::tag::PRIOR]);
        let mut adam = AdamState::new(&self.params, AdamConfig::with_lr(cfg.lr));
        if let Some(d) = cfg.ema {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid(format!("EMA decay must lie in [0, 1), got {d}")));
            }
        }
        let mut avg = cfg.ema.map(|_| self.params.clone());
        let mut order: Vec<usize> = (0..n).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut r);
            let mut total = 0.0;
            let mut batches = 0;
            for idx in order.chunks(cfg.batch_size.max(1)) {
                let tape = Tape::new();
                let leaves: Vec<_> = self.params.blocks().iter().map(|p| tape.leaf(p.clone())).collect();
                let m: Vec<f64> = idx.iter().map(|&i| mult[i]).collect();
                let loss = self.batch_loss(&tape, &leaves, &x.select_rows(idx), &m, &mut r)?;
                let lv = loss.value().item();
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        what: "prior training".into(),
                        detail: format!("loss {lv} at epoch {epoch}"),
                    });
                }
                total += lv;
                batches += 1;
                if self.params.is_empty() {
                    continue;
                }
                let refs: Vec<_> = leaves.iter().collect();
                let grads = tape.backward(&loss, None, &refs)?;
                adam_step(&mut self.params, &grads, &mut adam)?;
                if let (Some(avg), Some(d)) = (avg.as_mut(), cfg.ema) {
                    for (a, p) in avg.blocks_mut().iter_mut().zip(self.params.blocks()) {
                        *a = a.zip_map(p, |a, p| d * a + (1.0 - d) * p);
                    }
                }
            }
            history.push(total / batches as f64);
        }
        if let Some(avg) = avg {
            self.params = avg;
        }
        Ok(history)
    }
}
