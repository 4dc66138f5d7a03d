//! The outer loop: moving dataset, per-round model fitting, candidate
//! selection and evaluation.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::bench::{initial_design, Objective, TaskSpec};
use crate::config::{Method, RunConfig};
use crate::diffusion::{DiffusionModel, ResidualEps, NoiseSchedule, PriorTrainConfig};
use crate::error::{Error, Result};
use crate::likelihood::{filter_top_b, search_and_score, OdeConfig, SearchConfig};
use crate::nd::NdArray;
use crate::posterior::{finetune, FinetuneConfig, PosteriorSampler, ReplayView};
use crate::proxy::{compute_weights, train_ensemble, ProxyConfig, ProxyEnsemble};
use crate::rng;

/// Evaluated points with capacity `L`; the lowest scores are evicted.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub round_added: Vec<usize>,
    pub capacity: usize,
}

impl LabeledDataset {
    pub fn new(capacity: usize) -> Self {
        Self {
            x: Vec::new(),
            y: Vec::new(),
            round_added: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Appends `pairs`, then drops the lowest scores until the size is at
    /// most the capacity. Among equal scores the older point goes first.
    /// Returns the evicted pairs.
    pub fn update(&mut self, pairs: Vec<(Vec<f64>, f64)>, round: usize) -> Vec<(Vec<f64>, f64)> {
        for (x, y) in pairs {
            self.x.push(x);
            self.y.push(y);
            self.round_added.push(round);
        }
        let n = self.len();
        if n <= self.capacity {
            return Vec::new();
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            self.y[i]
                .total_cmp(&self.y[j])
                .then(self.round_added[i].cmp(&self.round_added[j]))
                .then(i.cmp(&j))
        });
        let mut evict = vec![false; n];
        for &i in &order[..n - self.capacity] {
            evict[i] = true;
        }
        let mut kept = LabeledDataset::new(self.capacity);
        let mut gone = Vec::new();
        for i in 0..n {
            if evict[i] {
                gone.push((std::mem::take(&mut self.x[i]), self.y[i]));
            } else {
                kept.x.push(std::mem::take(&mut self.x[i]));
                kept.y.push(self.y[i]);
                kept.round_added.push(self.round_added[i]);
            }
        }
        *self = kept;
        gone
    }

    pub fn x_array(&self) -> Result<NdArray> {
        NdArray::from_rows(&self.x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub evals: usize,
    pub best_y: f64,
    pub batch_best: f64,
    pub batch_mean: f64,
    pub rtb_loss: f64,
    pub log_z: f64,
    pub seconds: f64,
    pub diagnostics: RoundDiagnostics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RoundDiagnostics {
    pub dataset_size: usize,
    pub on_policy: usize,
    pub off_policy: usize,
    /// Range of `β r` over the selected candidates.
    pub beta_reward_min: Option<f64>,
    pub beta_reward_max: Option<f64>,
    pub stopped_early: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunHistory {
    pub records: Vec<RoundRecord>,
    pub best_x: Vec<f64>,
    pub best_y: f64,
    pub evals: usize,
    pub total_seconds: f64,
}

/// Everything carried from one round to the next.
#[derive(Debug)]
pub struct RunState {
    pub round: usize,
    pub evals_used: usize,
    pub best_x: Vec<f64>,
    pub best_y: f64,
    pub dataset: LabeledDataset,
    pub objective: Objective,
}

impl RunState {
    fn absorb(&mut self, x: &[Vec<f64>], y: &[f64]) {
        for (xi, &yi) in x.iter().zip(y) {
            if yi > self.best_y {
                self.best_y = yi;
                self.best_x = xi.clone();
            }
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn round_seed(cfg: &RunConfig, round: usize) -> u64 {
    rng::stream(cfg.seed, &[round as u64]).random()
}

pub fn proxy_config(cfg: &RunConfig) -> ProxyConfig {
    ProxyConfig {
        members: cfg.proxy_members,
        hidden_units: cfg.proxy_hidden,
        num_layers: cfg.proxy_layers,
        gamma: cfg.gamma,
        epochs: cfg.proxy_epochs,
        lr: cfg.proxy_lr,
        batch_size: cfg.proxy_batch,
    }
}

pub fn search_config(cfg: &RunConfig) -> SearchConfig {
    SearchConfig {
        steps: cfg.local_steps,
        eta: cfg.eta,
        beta: cfg.beta,
        ode: OdeConfig {
            n_steps: cfg.ode_steps,
            n_probes: cfg.ode_probes,
            t_min: cfg.t_min,
            grad_mode: cfg.grad_mode,
        },
        chunk: cfg.search_chunk,
    }
}

/// Smallest standard deviation of the Gaussian skip path of the prior.
const MIN_BASE_STD: f64 = 0.05;

/// The prior's noise predictor: the exact predictor of a Gaussian fitted to
/// the weighted data plus a trained MLP correction.
fn train_prior_model(cfg: &RunConfig, x_unit: &NdArray, weights: &[f64], seed: u64) -> Result<DiffusionModel<ResidualEps>> {
    let schedule = NoiseSchedule::linear(cfg.diffusion_steps)?.with_variance(cfg.reverse_variance);
    let net = ResidualEps::fitted(x_unit, Some(weights), MIN_BASE_STD, cfg.prior_hidden, cfg.prior_layers, cfg.diffusion_steps)?;
    let mut prior = DiffusionModel::new(schedule, net, seed);
    let tc = PriorTrainConfig {
        epochs: cfg.prior_epochs,
        lr: cfg.prior_lr,
        batch_size: cfg.prior_batch,
        ema: None,
    };
    prior.train(x_unit, Some(weights), &tc, seed)?;
    Ok(prior)
}

struct Proposal {
    x_unit: NdArray,
    rtb_loss: f64,
    log_z: f64,
    diagnostics: RoundDiagnostics,
}

fn propose_dibo(cfg: &RunConfig, spec: &TaskSpec, ds: &LabeledDataset, count: usize, seed: u64) -> Result<Proposal> {
    let clock = Instant::now();
    let x_unit = spec.to_unit_rows(&ds.x_array()?);
    let weights = dataset_weights(cfg, &ds.y)?;

    let pc = proxy_config(cfg);
    let mut proxy = ProxyEnsemble::new(cfg.dim, &pc, seed)?;
    train_ensemble(&mut proxy, &x_unit, &ds.y, &weights, &pc, seed)?;

    let t_proxy = clock.elapsed().as_secs_f64();
    let prior = train_prior_model(cfg, &x_unit, &weights, seed)?;
    let t_prior = clock.elapsed().as_secs_f64();

    let mut sampler = PosteriorSampler::from_prior(&prior, cfg.beta)?;
    let scores = proxy.ucb(&x_unit)?;
    let view = ReplayView {
        x: &x_unit,
        scores: &scores,
    };
    let fc = FinetuneConfig {
        iterations: cfg.finetune_epochs,
        batch_size: cfg.finetune_batch,
        lr: cfg.finetune_lr,
        logz_lr: cfg.logz_lr,
        off_policy_prob: cfg.off_policy_prob,
        warm_start_log_z: cfg.logz_warm_start,
    };
    let report = finetune(&mut sampler, &prior, &proxy, Some(&view), &fc, seed)?;

    let t_finetune = clock.elapsed().as_secs_f64();
    let cand_seed = rng::stream(seed, &[rng::tag::CANDIDATES]).random();
    let traj = sampler.model.sample(cfg.candidates, cand_seed)?;
    let scored = search_and_score(traj.x0(), &prior, &proxy, &search_config(cfg), seed)?;
    let keep = filter_top_b(&scored, count)?;
    let chosen: Vec<Vec<f64>> = keep.iter().map(|&i| scored[i].x.clone()).collect();
    let br: Vec<f64> = keep.iter().map(|&i| cfg.beta * scored[i].reward).collect();
    let diagnostics = RoundDiagnostics {
        dataset_size: ds.len(),
        on_policy: report.on_policy,
        off_policy: report.off_policy,
        beta_reward_min: Some(br.iter().copied().fold(f64::INFINITY, f64::min)),
        beta_reward_max: Some(max(&br)),
        stopped_early: scored.iter().filter(|c| c.stopped_early).count(),
    };
    log::debug!(
        "phase ends (s): proxy {t_proxy:.2} prior {t_prior:.2} finetune {t_finetune:.2} search {:.2}",
        clock.elapsed().as_secs_f64()
    );
    log::debug!(
        "finetune losses first {:.3e} last {:.3e}; log Z {:.3}",
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.final_loss(),
        sampler.log_z
    );
    Ok(Proposal {
        x_unit: NdArray::from_rows(&chosen)?,
        rtb_loss: report.final_loss(),
        log_z: sampler.log_z,
        diagnostics,
    })
}

fn dataset_weights(cfg: &RunConfig, y: &[f64]) -> Result<Vec<f64>> {
    if cfg.reweight {
        compute_weights(y, cfg.weight_mode)
    } else {
        Ok(vec![1.0 / y.len() as f64; y.len()])
    }
}

fn propose_prior_only(cfg: &RunConfig, spec: &TaskSpec, ds: &LabeledDataset, count: usize, seed: u64) -> Result<Proposal> {
    let x_unit = spec.to_unit_rows(&ds.x_array()?);
    let weights = dataset_weights(cfg, &ds.y)?;
    let prior = train_prior_model(cfg, &x_unit, &weights, seed)?;
    let cand_seed = rng::stream(seed, &[rng::tag::CANDIDATES]).random();
    let x = prior.sample(count, cand_seed)?.x0().map(|v| v.clamp(-1.0, 1.0));
    Ok(Proposal {
        x_unit: x,
        rtb_loss: f64::NAN,
        log_z: f64::NAN,
        diagnostics: RoundDiagnostics {
            dataset_size: ds.len(),
            ..RoundDiagnostics::default()
        },
    })
}

fn propose_random(cfg: &RunConfig, ds: &LabeledDataset, count: usize, seed: u64) -> Result<Proposal> {
    let mut r = rng::stream(seed, &[rng::tag::BASELINE]);
    let data = (0..count * cfg.dim).map(|_| r.random_range(-1.0..1.0)).collect();
    Ok(Proposal {
        x_unit: NdArray::new(count, cfg.dim, data)?,
        rtb_loss: f64::NAN,
        log_z: f64::NAN,
        diagnostics: RoundDiagnostics {
            dataset_size: ds.len(),
            ..RoundDiagnostics::default()
        },
    })
}

/// Starts a run: evaluates the initial design and records round 0.
pub fn init_state(cfg: &RunConfig) -> Result<(RunState, RoundRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = TaskSpec::new(cfg.task, cfg.dim)?;
    let objective = Objective::new(spec.clone());
    let x0 = initial_design(&spec, cfg.init, cfg.seed)?;
    let y0 = objective.evaluate_rows(&x0)?;
    let xs: Vec<Vec<f64>> = x0.iter_rows().map(<[f64]>::to_vec).collect();
    let mut state = RunState {
        round: 0,
        evals_used: y0.len(),
        best_x: xs[0].clone(),
        best_y: f64::NEG_INFINITY,
        dataset: LabeledDataset::new(cfg.buffer),
        objective,
    };
    state.absorb(&xs, &y0);
    state.dataset.update(xs.into_iter().zip(y0.iter().copied()).collect(), 0);
    let rec = RoundRecord {
        round: 0,
        evals: state.evals_used,
        best_y: state.best_y,
        batch_best: max(&y0),
        batch_mean: mean(&y0),
        rtb_loss: f64::NAN,
        log_z: f64::NAN,
        seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        diagnostics: RoundDiagnostics {
            dataset_size: state.dataset.len(),
            ..RoundDiagnostics::default()
        },
    };
    Ok((state, rec))
}

/// One round: fit models on the current dataset, propose at most `B`
/// points (fewer if the budget remainder is smaller), evaluate them and
/// update the dataset.
pub fn run_round(state: &mut RunState, cfg: &RunConfig) -> Result<RoundRecord> {
    let round = state.round + 1;
    let wrap = |e: Error| Error::Round {
        round,
        source: Box::new(e),
    };
    if state.dataset.is_empty() {
        return Err(wrap(Error::Empty("dataset")));
    }
    let count = cfg.batch.min(cfg.budget.saturating_sub(state.evals_used));
    if count == 0 {
        return Err(wrap(Error::invalid("evaluation budget exhausted")));
    }
    let start = Instant::now();
    let seed = round_seed(cfg, round);
    let spec = state.objective.spec().clone();
    let proposal = match cfg.method {
        Method::Dibo => propose_dibo(cfg, &spec, &state.dataset, count, seed),
        Method::PriorOnly => propose_prior_only(cfg, &spec, &state.dataset, count, seed),
        Method::Random => propose_random(cfg, &state.dataset, count, seed),
    }
    .map_err(wrap)?;
    let x_native = spec.from_unit_rows(&proposal.x_unit);
    let y = state.objective.evaluate_rows(&x_native).map_err(wrap)?;
    let xs: Vec<Vec<f64>> = x_native.iter_rows().map(<[f64]>::to_vec).collect();
    state.absorb(&xs, &y);
    state.evals_used += y.len();
    state.dataset.update(xs.into_iter().zip(y.iter().copied()).collect(), round);
    state.round = round;
    let mut diagnostics = proposal.diagnostics;
    diagnostics.dataset_size = state.dataset.len();
    let rec = RoundRecord {
        round,
        evals: state.evals_used,
        best_y: state.best_y,
        batch_best: max(&y),
        batch_mean: mean(&y),
        rtb_loss: proposal.rtb_loss,
        log_z: proposal.log_z,
        seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        diagnostics,
    };
    log::info!(
        "round {round}: evals {} best {:.4} batch best {:.4} mean {:.4} rtb {:.3e} logZ {:.3} ({:.1}s)",
        rec.evals,
        rec.best_y,
        rec.batch_best,
        rec.batch_mean,
        rec.rtb_loss,
        rec.log_z,
        start.elapsed().as_secs_f64()
    );
    Ok(rec)
}

/// Runs rounds until the evaluation budget (which includes the initial
/// design) is spent.
pub fn run(cfg: &RunConfig) -> Result<RunHistory> {
    run_with(cfg, |_| {})
}

/// [`run`] with a callback after every round record.
pub fn run_with(cfg: &RunConfig, mut on_round: impl FnMut(&RoundRecord)) -> Result<RunHistory> {
    let start = Instant::now();
    let (mut state, rec0) = init_state(cfg)?;
    on_round(&rec0);
    let mut records = vec![rec0];
    while state.evals_used < cfg.budget {
        let rec = run_round(&mut state, cfg)?;
        on_round(&rec);
        records.push(rec);
    }
    debug_assert_eq!(state.objective.eval_count() as usize, state.evals_used);
    Ok(RunHistory {
        records,
        best_x: state.best_x,
        best_y: state.best_y,
        evals: state.evals_used,
        total_seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
    })
}
