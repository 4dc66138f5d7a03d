//! Probability-flow ODE likelihood of the prior, gradient-ascent local
//! search on the unnormalized posterior, and top-B filtering.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, NoisePredictor};
use crate::error::{Error, Result};
use crate::nd::{grad, Eager, NdArray, Ops, Tape, Var};
use crate::proxy::RewardModel;
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Differentiate the full RK4 integration.
    OdeFull,
    /// Use the model score at `t_min` as `∇ log p`.
    ScoreApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub n_steps: usize,
    pub n_probes: usize,
    pub t_min: f64,
    pub grad_mode: GradMode,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            n_steps: 30,
            n_probes: 1,
            t_min: 1e-3,
            grad_mode: GradMode::OdeFull,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 4 {
            return Err(Error::invalid(format!("ODE needs at least 4 steps, got {}", self.n_steps)));
        }
        if self.n_probes == 0 {
            return Err(Error::invalid("ODE needs at least one probe"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::invalid(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        Ok(())
    }
}

/// `(1/n) Σ_ν νᵀ (∂f/∂x) ν` for a field `f: R^d -> R^d` on a `[1, d]` point.
pub fn hutchinson_div<F>(f: F, x: &NdArray, probes: &[NdArray]) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    if probes.is_empty() {
        return Err(Error::invalid("hutchinson_div needs at least one probe"));
    }
    let mut acc = 0.0;
    for nu in probes {
        let g = crate::nd::vjp(&f, x, nu)?;
        acc += g.data().iter().zip(nu.data()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(acc / probes.len() as f64)
}

/// Fixed Rademacher probes for candidates `first..first + n`:
/// `n_probes` arrays of shape `[n, d]`, row `i` drawn from the stream of
/// candidate `first + i`.
pub fn make_probes(n: usize, d: usize, n_probes: usize, seed: u64, first: usize) -> Vec<NdArray> {
    let mut rows: Vec<Vec<NdArray>> = (first..first + n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::tag::PROBES, i as u64]);
            (0..n_probes).map(|_| rng::rademacher_array(&mut r, 1, d)).collect()
        })
        .collect();
    (0..n_probes)
        .map(|k| NdArray::vstack(&rows.iter_mut().map(|r| r[k].clone()).collect::<Vec<_>>()).expect("equal widths"))
        .collect()
}

struct Drift {
    beta: f64,
    score_coef: f64,
    tau: f64,
}

fn drift_coefs<P: NoisePredictor>(prior: &DiffusionModel<P>, t: f64) -> Drift {
    let steps = prior.steps() as f64;
    let t = t.min(1.0);
    let t_eff = t.max(1.0 / steps);
    let ab = prior.schedule.log_alpha_bar_cont(t_eff).0.exp();
    let beta = prior.schedule.beta_cont(t);
    Drift {
        beta,
        score_coef: 1.0 / (1.0 - ab).sqrt(),
        tau: t_eff * steps,
    }
}

/// `f̄(x, t) = −½ β(t) (x + s(x, t))`, with `s = −ε̂ / √(1 − ᾱ)`.
fn drift<B: Ops, P: NoisePredictor>(b: &B, prior: &DiffusionModel<P>, params: &[B::V], x: &B::V, t: f64) -> Result<B::V> {
    let c = drift_coefs(prior, t);
    let rows = b.shape(x)[0];
    let eps = prior.eps(b, params, x, &vec![c.tau; rows])?;
    Ok(b.add(&b.scale(x, -0.5 * c.beta), &b.scale(&eps, 0.5 * c.beta * c.score_coef)))
}

/// Model score `s(x, t)` for every row.
pub fn score<P: NoisePredictor>(prior: &DiffusionModel<P>, x: &NdArray, t: f64) -> Result<NdArray> {
    let c = drift_coefs(prior, t);
    let eps = prior.eps(&Eager, prior.params.blocks(), x, &vec![c.tau; x.rows()])?;
    Ok(eps.map(|e| -e * c.score_coef))
}

fn std_normal_logpdf_rows(x: &NdArray) -> Vec<f64> {
    let c = -0.5 * (2.0 * PI).ln() * x.cols() as f64;
    x.iter_rows().map(|r| c - 0.5 * r.iter().map(|v| v * v).sum::<f64>()).collect()
}

fn check_inputs<P: NoisePredictor>(prior: &DiffusionModel<P>, x0: &NdArray, probes: &[NdArray], cfg: &OdeConfig) -> Result<()> {
    cfg.validate()?;
    if x0.cols() != prior.dim() {
        return Err(Error::shape("log_marginal", format!("{} columns vs model dim {}", x0.cols(), prior.dim())));
    }
    if probes.len() != cfg.n_probes || probes.iter().any(|p| p.shape() != x0.shape()) {
        return Err(Error::shape("log_marginal", format!("need {} probes of shape {:?}", cfg.n_probes, x0.shape())));
    }
    if !x0.is_finite() {
        return Err(Error::invalid("log_marginal at a non-finite point"));
    }
    Ok(())
}

fn integration_error(step: usize, e: Error) -> Error {
    Error::Diverged {
        what: "probability-flow integration".into(),
        detail: format!("step {step}: {e}"),
    }
}

/// Value-only drift and divergence estimate at one stage.
fn stage_value<P: NoisePredictor>(prior: &DiffusionModel<P>, x: &NdArray, t: f64, probes: &[NdArray]) -> Result<(NdArray, Vec<f64>)> {
    let tape = Tape::new();
    let params = tape.lift(&prior.params);
    let xv = tape.leaf(x.clone());
    let f = drift(&tape, prior, &params, &xv, t)?;
    let mut div = vec![0.0; x.rows()];
    for nu in probes {
        let g = tape.backward(&f, Some(nu), &[&xv])?.remove(0);
        for (r, d) in div.iter_mut().enumerate() {
            *d += g.row(r).iter().zip(nu.row(r)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let k = probes.len() as f64;
    div.iter_mut().for_each(|d| *d /= k);
    Ok(((*f.value()).clone(), div))
}

/// PF-ODE estimate of `log p_θ(x_0)` for each row, integrating from `t_min`
/// to 1 with fixed-step RK4.
pub fn log_marginal<P: NoisePredictor>(prior: &DiffusionModel<P>, x0: &NdArray, probes: &[NdArray], cfg: &OdeConfig) -> Result<Vec<f64>> {
    check_inputs(prior, x0, probes, cfg)?;
    let n = x0.rows();
    let h = (1.0 - cfg.t_min) / cfg.n_steps as f64;
    let mut x = x0.clone();
    let mut ell = vec![0.0; n];
    let axpy = |x: &NdArray, k: &NdArray, s: f64| x.zip_map(k, |a, b| a + s * b);
    for step in 0..cfg.n_steps {
        let t = cfg.t_min + step as f64 * h;
        let run = || -> Result<(NdArray, Vec<f64>)> {
            let (k1, d1) = stage_value(prior, &x, t, probes)?;
            let (k2, d2) = stage_value(prior, &axpy(&x, &k1, 0.5 * h), t + 0.5 * h, probes)?;
            let (k3, d3) = stage_value(prior, &axpy(&x, &k2, 0.5 * h), t + 0.5 * h, probes)?;
            let (k4, d4) = stage_value(prior, &axpy(&x, &k3, h), t + h, probes)?;
            let mut next = x.clone();
            for (i, o) in next.data_mut().iter_mut().enumerate() {
                *o += h / 6.0 * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
            }
            let dl = (0..n).map(|r| h / 6.0 * (d1[r] + 2.0 * d2[r] + 2.0 * d3[r] + d4[r])).collect();
            Ok((next, dl))
        };
        let (next, dl) = run().map_err(|e| integration_error(step, e))?;
        if !next.is_finite() {
            return Err(integration_error(step, Error::invalid("non-finite state")));
        }
        x = next;
        for (e, d) in ell.iter_mut().zip(dl) {
            *e += d;
        }
    }
    Ok(std_normal_logpdf_rows(&x).into_iter().zip(ell).map(|(a, b)| a + b).collect())
}

/// Log-marginal and its exact gradient with respect to `x0`, by
/// differentiating through every RK4 stage including the divergence term.
pub fn log_marginal_and_grad<P: NoisePredictor>(
    prior: &DiffusionModel<P>,
    x0: &NdArray,
    probes: &[NdArray],
    cfg: &OdeConfig,
) -> Result<(Vec<f64>, NdArray)> {
    check_inputs(prior, x0, probes, cfg)?;
    let n = x0.rows();
    let tape = Tape::new();
    let params = tape.lift(&prior.params);
    let nus: Vec<Var> = probes.iter().map(|p| tape.constant(p.clone())).collect();
    let inv_k = 1.0 / probes.len() as f64;
    let h = (1.0 - cfg.t_min) / cfg.n_steps as f64;
    let stage = |x: &Var, t: f64| -> Result<(Var, Var)> {
        let f = drift(&tape, prior, &params, x, t)?;
        let mut div: Option<Var> = None;
        for nu in &nus {
            let g = tape.backward_graph(&f, Some(nu), &[x])?.remove(0);
            let d = g.mul(nu).sum_cols();
            div = Some(match div {
                Some(acc) => acc.add(&d),
                None => d,
            });
        }
        Ok((f, div.expect("at least one probe").scale(inv_k)))
    };
    let x_start = tape.leaf(x0.clone());
    let mut x = x_start.clone();
    let mut ell = tape.constant(NdArray::zeros(n, 1));
    for step in 0..cfg.n_steps {
        let t = cfg.t_min + step as f64 * h;
        let run = || -> Result<(Var, Var)> {
            let (k1, d1) = stage(&x, t)?;
            let (k2, d2) = stage(&x.add(&k1.scale(0.5 * h)), t + 0.5 * h)?;
            let (k3, d3) = stage(&x.add(&k2.scale(0.5 * h)), t + 0.5 * h)?;
            let (k4, d4) = stage(&x.add(&k3.scale(h)), t + h)?;
            let dx = k1.add(&k2.scale(2.0)).add(&k3.scale(2.0)).add(&k4).scale(h / 6.0);
            let dl = d1.add(&d2.scale(2.0)).add(&d3.scale(2.0)).add(&d4).scale(h / 6.0);
            Ok((x.add(&dx), ell.add(&dl)))
        };
        let (nx, nl) = run().map_err(|e| integration_error(step, e))?;
        tape.check_finite().map_err(|e| integration_error(step, e))?;
        x = nx;
        ell = nl;
    }
    let d = x0.cols() as f64;
    let logp = x.square().sum_cols().scale(-0.5).offset(-0.5 * d * (2.0 * PI).ln()).add(&ell);
    let g = tape.backward(&logp, Some(&NdArray::zeros(n, 1).map(|_| 1.0)), &[&x_start])?.remove(0);
    Ok((logp.value().data().to_vec(), g))
}

/// `∇ log p_θ` at every row under the configured gradient mode.
fn prior_grad<P: NoisePredictor>(prior: &DiffusionModel<P>, x: &NdArray, probes: &[NdArray], cfg: &OdeConfig) -> Result<NdArray> {
    match cfg.grad_mode {
        GradMode::OdeFull => Ok(log_marginal_and_grad(prior, x, probes, cfg)?.1),
        GradMode::ScoreApprox => score(prior, x, cfg.t_min),
    }
}

/// `∇ r` at every row.
pub fn reward_grad<R: RewardModel>(reward: &R, x: &NdArray) -> Result<NdArray> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let r = reward.reward(&tape, &xv)?;
    Ok(tape.backward(&r, Some(&NdArray::filled(x.rows(), 1, 1.0)), &[&xv])?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub index: usize,
    pub x: Vec<f64>,
    pub logp_prior: f64,
    pub reward: f64,
    pub log_target: f64,
    /// Local search stopped early on a non-finite gradient.
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub steps: usize,
    pub eta: f64,
    pub beta: f64,
    pub ode: OdeConfig,
    pub chunk: usize,
}

/// `J` steps of `x ← clip(x + η ∇(log p_θ + β r), −1, 1)` on the rows of
/// `x`. Rows whose gradient turns non-finite keep their last finite iterate.
pub fn local_search<P: NoisePredictor, R: RewardModel>(
    x: &NdArray,
    prior: &DiffusionModel<P>,
    reward: &R,
    probes: &[NdArray],
    cfg: &SearchConfig,
) -> Result<(NdArray, Vec<bool>)> {
    if !(cfg.eta > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {}", cfg.eta)));
    }
    let mut x = x.clone();
    let n = x.rows();
    let mut active: Vec<usize> = (0..n).collect();
    let mut stopped = vec![false; n];
    for _ in 0..cfg.steps {
        if active.is_empty() {
            break;
        }
        let xa = x.select_rows(&active);
        let pa: Vec<NdArray> = probes.iter().map(|p| p.select_rows(&active)).collect();
        let g = match prior_grad(prior, &xa, &pa, &cfg.ode) {
            Ok(gp) => {
                let gr = reward_grad(reward, &xa)?;
                Some(gp.zip_map(&gr, |a, b| a + cfg.beta * b))
            }
            Err(_) if active.len() > 1 => None,
            Err(e) => {
                log::warn!("local search stopped early: {e}");
                stopped[active[0]] = true;
                active.clear();
                continue;
            }
        };
        // On a batch failure fall back to rows one at a time to find the culprits.
        let rows: Vec<(usize, Option<Vec<f64>>)> = match g {
            Some(g) => active.iter().enumerate().map(|(k, &i)| (i, Some(g.row(k).to_vec()))).collect(),
            None => active
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let xi = xa.slice_rows(k, 1);
                    let pi: Vec<NdArray> = pa.iter().map(|p| p.slice_rows(k, 1)).collect();
                    let gi = prior_grad(prior, &xi, &pi, &cfg.ode)
                        .and_then(|gp| Ok(gp.zip_map(&reward_grad(reward, &xi)?, |a, b| a + cfg.beta * b)));
                    (i, gi.ok().map(|v| v.into_data()))
                })
                .collect(),
        };
        let mut still = Vec::with_capacity(active.len());
        for (i, gi) in rows {
            match gi {
                Some(gv) if gv.iter().all(|v| v.is_finite()) => {
                    for (o, gv) in x.row_mut(i).iter_mut().zip(gv) {
                        *o = (*o + cfg.eta * gv).clamp(-1.0, 1.0);
                    }
                    still.push(i);
                }
                _ => {
                    log::warn!("local search: candidate {i} stopped early on a non-finite gradient");
                    stopped[i] = true;
                }
            }
        }
        active = still;
    }
    Ok((x, stopped))
}

/// Local search followed by scoring, in parallel chunks of candidates.
/// Candidate `i` uses the probes of stream `(seed, i)`.
pub fn search_and_score<P: NoisePredictor, R: RewardModel>(
    x: &NdArray,
    prior: &DiffusionModel<P>,
    reward: &R,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<Vec<ScoredCandidate>> {
    let d = x.cols();
    let parts = par::try_map_chunks(x.rows(), cfg.chunk, |start, len| {
        let probes = make_probes(len, d, cfg.ode.n_probes, seed, start);
        let (xs, stopped) = local_search(&x.slice_rows(start, len), prior, reward, &probes, cfg)?;
        score_candidates(&xs, prior, reward, &probes, cfg, start, &stopped)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

fn score_candidates<P: NoisePredictor, R: RewardModel>(
    x: &NdArray,
    prior: &DiffusionModel<P>,
    reward: &R,
    probes: &[NdArray],
    cfg: &SearchConfig,
    first: usize,
    stopped: &[bool],
) -> Result<Vec<ScoredCandidate>> {
    let r = reward.reward(&Eager, x)?.into_data();
    let lp = match log_marginal(prior, x, probes, &cfg.ode) {
        Ok(v) => v,
        Err(_) if x.rows() > 1 => (0..x.rows())
            .map(|i| {
                let pi: Vec<NdArray> = probes.iter().map(|p| p.slice_rows(i, 1)).collect();
                log_marginal(prior, &x.slice_rows(i, 1), &pi, &cfg.ode)
                    .map(|v| v[0])
                    .unwrap_or(f64::NEG_INFINITY)
            })
            .collect(),
        Err(_) => vec![f64::NEG_INFINITY],
    };
    Ok((0..x.rows())
        .map(|i| ScoredCandidate {
            index: first + i,
            x: x.row(i).to_vec(),
            logp_prior: lp[i],
            reward: r[i],
            log_target: lp[i] + cfg.beta * r[i],
            stopped_early: stopped[i],
        })
        .collect())
}

/// Indices of the `b` largest `log_target` values; ties go to the lower
/// index.
pub fn filter_top_b(candidates: &[ScoredCandidate], b: usize) -> Result<Vec<usize>> {
    if b > candidates.len() {
        return Err(Error::invalid(format!("cannot keep {b} of {} candidates", candidates.len())));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, c) = (candidates[i].log_target, candidates[j].log_target);
        c.partial_cmp(&a).unwrap_or_else(|| a.is_nan().cmp(&c.is_nan()))
    });
    order.truncate(b);
    Ok(order)
}

/// Exact divergence through the full Jacobian; a test oracle for small `d`.
pub fn exact_div<F>(f: F, x: &NdArray) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    let d = x.cols();
    let mut tr = 0.0;
    for i in 0..d {
        let gi = grad(|v| Ok(f(v)?.slice_cols(i, 1).sum()), x)?;
        tr += gi.data()[i];
    }
    Ok(tr)
}
