//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::time::Instant;

use common::oracle::{analytic_prior, chain_variance, gaussian_posterior, residual_prior};
use common::{fd_grad, rel_err};
use dibo::bench::TaskName;
use dibo::config::{Method, RunConfig};
use dibo::diffusion::{DiffusionModel, NoiseSchedule, PriorTrainConfig};
use dibo::likelihood::{hutchinson_div, local_search, log_marginal, make_probes, OdeConfig, SearchConfig};
use dibo::nd::{grad, NdArray, Tape, Var};
use dibo::nn::{mlp_forward, MlpSpec, NoiseNet};
use dibo::optimizer::{init_state, run, run_round};
use dibo::posterior::{finetune, FinetuneConfig, PosteriorSampler};
use dibo::proxy::QuadraticReward;
use dibo::report::rounds_csv;
use dibo::{rng, Result};

type Verdict = Result<(bool, String)>;

fn gaussian_logpdf(x: &[f64], s: f64) -> f64 {
    x.iter().map(|v| -0.5 * (2.0 * std::f64::consts::PI * s * s).ln() - v * v / (2.0 * s * s)).sum()
}

fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>() / a.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn autodiff() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..40u64 {
        let d = 1 + (seed as usize % 8);
        let spec = MlpSpec::new(d, 2, 6, 1 + seed as usize % 3).with_layer_norm(seed % 2 == 0);
        let params = spec.init(&mut rng::stream(seed, &[1]), false);
        let f = |tape: &Tape, x: &Var| -> Result<Var> {
            let p: Vec<Var> = params.blocks().iter().map(|b| tape.constant(b.clone())).collect();
            let y = mlp_forward(tape, &spec, &p, x)?;
            Ok(y.square().offset(1.0).sqrt().mul(&y.scale(0.3).exp()).sum())
        };
        let x = common::uniform(seed, 3, d, -1.0, 1.0);
        let g = grad(|x| f(x.tape(), x), &x)?;
        let fd = fd_grad(
            |x| {
                let tape = Tape::new();
                f(&tape, &tape.constant(x.clone())).unwrap().value().item()
            },
            &x,
            1e-5,
        );
        worst = worst.max(rel_err(&g, &fd, 1e-6));
    }
    let mut nested: f64 = 0.0;
    for seed in 0..20u64 {
        let d = 1 + seed as usize % 4;
        let spec = MlpSpec::new(d, d, 5, 2).with_layer_norm(true);
        let params = spec.init(&mut rng::stream(seed, &[2]), false);
        let probe = common::uniform(seed + 1, 2, d, -1.0, 1.0).map(f64::signum);
        let h = |tape: &Tape, x: &Var| -> Result<Var> {
            let p: Vec<Var> = params.blocks().iter().map(|b| tape.constant(b.clone())).collect();
            let v = mlp_forward(tape, &spec, &p, x)?.vjp_graph(x, &probe)?;
            Ok(v.mul(&tape.constant(probe.clone())).sum())
        };
        let x = common::uniform(seed, 2, d, -1.0, 1.0);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = h(&tape, &xv)?;
        let g = tape.backward(&out, None, &[&xv])?.remove(0);
        let fd = fd_grad(
            |x| {
                let tape = Tape::new();
                h(&tape, &tape.leaf(x.clone())).unwrap().value().item()
            },
            &x,
            1e-5,
        );
        nested = nested.max(rel_err(&g, &fd, 1e-6));
    }
    Ok((worst < 1e-5 && nested < 1e-4, format!("max rel err {worst:.2e} (< 1e-5), nested {nested:.2e} (< 1e-4)")))
}

fn likelihood_oracle() -> Verdict {
    let prior = analytic_prior(2, 0.5, 30);
    let x = common::normal(1, 256, 2, 0.5);
    let probes = make_probes(256, 2, 1, 0, 0);
    let coarse = log_marginal(&prior, &x, &probes, &OdeConfig::default())?;
    let fine = log_marginal(&prior, &x, &probes, &OdeConfig { n_steps: 60, ..OdeConfig::default() })?;
    let truth: Vec<f64> = x.iter_rows().map(|r| gaussian_logpdf(r, 0.5)).collect();
    let err = mae(&coarse, &truth);
    let shift = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err < 0.15 && shift < 0.05, format!("MAE {err:.4} nats (< 0.15), step halving shift {shift:.4} (< 0.05)")))
}

fn trained_likelihood() -> Verdict {
    let x = common::normal(2, 5000, 2, 0.5);
    let mut prior = DiffusionModel::new(NoiseSchedule::linear(30)?, NoiseNet::new(2, 64, 4, 30), 3);
    let cfg = PriorTrainConfig {
        epochs: 200,
        lr: 1e-3,
        batch_size: 256,
        ema: Some(0.99),
    };
    prior.train(&x, None, &cfg, 3)?;
    let held = common::normal(99, 128, 2, 0.5);
    let est = log_marginal(&prior, &held, &make_probes(128, 2, 1, 4, 0), &OdeConfig::default())?;
    let truth: Vec<f64> = held.iter_rows().map(|r| gaussian_logpdf(r, 0.5)).collect();
    let err = mae(&est, &truth);
    Ok((err < 0.3, format!("MAE {err:.4} nats on 128 held-out points (< 0.3)")))
}

fn rtb_oracle() -> Verdict {
    let (s, beta, c) = (0.5, 4.0, vec![0.5, -0.5]);
    let prior = residual_prior(2, s, 30, 32, 1);
    let (mean, var, log_z) = gaussian_posterior(chain_variance(&prior.schedule, s), beta, &c);
    let mut sampler = PosteriorSampler::from_prior(&prior, beta)?;
    let cfg = FinetuneConfig {
        iterations: 400,
        batch_size: 128,
        lr: 2e-3,
        logz_lr: 1e-2,
        off_policy_prob: 0.0,
        warm_start_log_z: true,
    };
    finetune(&mut sampler, &prior, &QuadraticReward { center: c }, None, &cfg, 5)?;
    let (m, sd) = common::mean_std_cols(sampler.model.sample(4096, 11)?.x0());
    let dm = m.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ds = sd.iter().map(|v| (v / var.sqrt() - 1.0).abs()).fold(0.0, f64::max);
    let dz = (sampler.log_z - log_z).abs();
    Ok((
        dm < 0.1 && ds < 0.15 && dz < 0.2,
        format!("mean err {dm:.3} (< 0.1), std rel err {ds:.3} (< 0.15), logZ err {dz:.3} (< 0.2)"),
    ))
}

fn local_search_oracle() -> Verdict {
    let (s, beta) = (0.5, 1.0);
    let c = vec![0.8, -0.6];
    let prior = analytic_prior(2, s, 30);
    let mode: Vec<f64> = c.iter().map(|v| v * beta * s * s / (1.0 + beta * s * s)).collect();
    let x = common::uniform(9, 16, 2, -1.0, 1.0);
    let cfg = SearchConfig {
        steps: 50,
        eta: 0.05,
        beta,
        ode: OdeConfig {
            n_steps: 20,
            ..OdeConfig::default()
        },
        chunk: 16,
    };
    let (out, _) = local_search(&x, &prior, &QuadraticReward { center: c }, &make_probes(16, 2, 1, 0, 0), &cfg)?;
    let worst = out
        .iter_rows()
        .map(|r| r.iter().zip(&mode).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Ok((worst < 1e-2, format!("max distance to the product mode {worst:.2e} over 16 starts (< 1e-2)")))
}

fn hutchinson() -> Verdict {
    let mut worst: f64 = 0.0;
    for d in 1..=4 {
        for seed in 0..5u64 {
            let a = common::normal(seed * 10 + d as u64, d, d, 1.0);
            let trace: f64 = (0..d).map(|i| a.get(i, i)).sum();
            let probes: Vec<NdArray> = (0..1usize << d)
                .map(|m| NdArray::new(1, d, (0..d).map(|i| if m >> i & 1 == 1 { 1.0 } else { -1.0 }).collect()).unwrap())
                .collect();
            let est = hutchinson_div(|v: &Var| Ok(v.matmul(&v.tape().constant(a.clone()), false, true)), &common::normal(seed, 1, d, 1.0), &probes)?;
            worst = worst.max((est - trace).abs());
        }
    }
    Ok((worst < 1e-12, format!("max |estimate - tr(A)| {worst:.1e} for d = 1..4")))
}

fn final_bests(base: &RunConfig, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.seed = s;
            let t = Instant::now();
            let y = run(&c)?.best_y;
            eprintln!("  {:?} {} seed {s}: best_y {y:.4} ({:.0}s)", c.method, c.task, t.elapsed().as_secs_f64());
            Ok(y)
        })
        .collect()
}

const SEEDS: [u64; 4] = [0, 1, 2, 3];

fn end_to_end() -> Verdict {
    let mut cfg = RunConfig::desk(TaskName::Ackley, 10);
    cfg.record_time = false;
    let dibo = final_bests(&cfg, &SEEDS)?;
    cfg.method = Method::Random;
    let random = final_bests(&cfg, &SEEDS)?;
    cfg.method = Method::PriorOnly;
    let prior_only = final_bests(&cfg, &SEEDS)?;
    let (d, r, p) = (median(&dibo), median(&random), median(&prior_only));
    Ok((d > r && d > p, format!("median best_y DiBO {d:.4} vs random {r:.4} and prior-only {p:.4}")))
}

fn reweighting_ablation() -> Verdict {
    let mut cfg = RunConfig::desk(TaskName::Rastrigin, 10);
    cfg.record_time = false;
    let with = final_bests(&cfg, &SEEDS)?;
    cfg.reweight = false;
    let without = final_bests(&cfg, &SEEDS)?;
    let (w, n) = (median(&with), median(&without));
    Ok((n <= w, format!("median best_y without reweighting {n:.4} <= with {w:.4}")))
}

fn toy(task: TaskName) -> RunConfig {
    common::toy(task, 3)
}

fn determinism() -> Verdict {
    let once = || -> Result<Vec<u8>> { rounds_csv(&run(&toy(TaskName::Rastrigin))?.records) };
    #[cfg(feature = "parallel")]
    let (a, b) = {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
        (pool.install(once)?, pool.install(once)?)
    };
    #[cfg(not(feature = "parallel"))]
    let (a, b) = (once()?, once()?);
    Ok((a == b, format!("two single-threaded runs, {} bytes of rounds.csv, identical: {}", a.len(), a == b)))
}

fn invariants() -> Verdict {
    let t = Instant::now();
    let mut violations = Vec::new();
    let mut rounds_total = 0;
    for task in [TaskName::Rastrigin, TaskName::Ackley, TaskName::Levy, TaskName::Rosenbrock] {
        for method in [Method::Dibo, Method::PriorOnly, Method::Random] {
            let mut cfg = toy(task);
            cfg.method = method;
            let (mut st, r0) = init_state(&cfg)?;
            let mut best = r0.best_y;
            let mut rounds = 0;
            while st.evals_used < cfg.budget {
                let rec = run_round(&mut st, &cfg)?;
                rounds += 1;
                if st.dataset.len() > cfg.buffer {
                    violations.push(format!("{task} {method:?}: dataset {} > L", st.dataset.len()));
                }
                if rec.evals != cfg.init + cfg.batch * rounds || st.objective.eval_count() as usize != rec.evals {
                    violations.push(format!("{task} {method:?}: {} evaluations after {rounds} rounds", rec.evals));
                }
                if rec.best_y < best {
                    violations.push(format!("{task} {method:?}: best_so_far fell"));
                }
                best = rec.best_y;
            }
            rounds_total += rounds;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = violations.is_empty() && secs < 60.0;
    let detail = if violations.is_empty() {
        format!("{rounds_total} rounds checked in {secs:.1}s (< 60s)")
    } else {
        violations.join("; ")
    };
    Ok((ok, detail))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with("--")).collect();
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("autodiff", autodiff),
        ("likelihood_oracle", likelihood_oracle),
        ("trained_prior_likelihood", trained_likelihood),
        ("rtb_posterior_oracle", rtb_oracle),
        ("local_search_oracle", local_search_oracle),
        ("hutchinson_exactness", hutchinson),
        ("end_to_end_ackley10", end_to_end),
        ("reweighting_ablation_rastrigin10", reweighting_ablation),
        ("determinism", determinism),
        ("bookkeeping_invariants", invariants),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !args.is_empty() && !args.iter().any(|a| name.contains(a.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        failed += usize::from(!pass);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
