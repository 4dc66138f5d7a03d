#![allow(dead_code)]

use dibo::diffusion::{AnalyticGaussianEps, DiffusionModel, NoiseSchedule, ResidualEps};
use dibo::nn::NoiseNet;

/// Law of `x_0` under the discrete chain driven by the exact predictor of
/// `N(0, s² I)`: every step is linear, so the variance propagates as
/// `v ← a² v + σ_t²` with `a = (1 − b c_t)/√α_t`.
pub fn chain_variance(sched: &NoiseSchedule, s: f64) -> f64 {
    let mut v = 1.0;
    for t in (1..=sched.steps()).rev() {
        let ab = sched.alpha_bar(t);
        let c = (1.0 - ab).sqrt() / (ab * s * s + 1.0 - ab);
        let (a, b) = sched.mean_coefs(t);
        let gain = a * (1.0 - b * c);
        v = gain * gain * v + sched.sigma2(t);
    }
    v
}

/// Product of `N(0, v I)` with `exp(−β‖x − c‖²/2)`: mean, variance and
/// log normalizer.
pub fn gaussian_posterior(v: f64, beta: f64, c: &[f64]) -> (Vec<f64>, f64, f64) {
    let k = 1.0 + beta * v;
    let mean = c.iter().map(|ci| ci * beta * v / k).collect();
    let log_z = c.iter().map(|ci| -0.5 * k.ln() - beta * ci * ci / (2.0 * k)).sum();
    (mean, v / k, log_z)
}

pub fn analytic_prior(dim: usize, s: f64, steps: usize) -> DiffusionModel<AnalyticGaussianEps> {
    DiffusionModel::new(NoiseSchedule::linear(steps).unwrap(), AnalyticGaussianEps::centered(dim, s), 0)
}

/// The analytic prior with a zero-initialized trainable correction, so the
/// fine-tuned sampler starts exactly at the prior.
pub fn residual_prior(dim: usize, s: f64, steps: usize, hidden: usize, seed: u64) -> DiffusionModel<ResidualEps> {
    let net = ResidualEps {
        base: AnalyticGaussianEps::centered(dim, s),
        correction: NoiseNet::new(dim, hidden, 3, steps),
    };
    DiffusionModel::new(NoiseSchedule::linear(steps).unwrap(), net, seed)
}
