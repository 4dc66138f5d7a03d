use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dibo::diffusion::{AnalyticGaussianEps, DiffusionModel, NoiseSchedule, ResidualEps};
use dibo::likelihood::{search_and_score, GradMode, OdeConfig, SearchConfig};
use dibo::nn::NoiseNet;
use dibo::proxy::{train_ensemble, ProxyConfig, ProxyEnsemble};
use dibo::rng;

fn workload(c: &mut Criterion) {
    let d = 10;
    let prior = DiffusionModel::new(
        NoiseSchedule::linear(30).unwrap(),
        ResidualEps {
            base: AnalyticGaussianEps::centered(d, 0.4),
            correction: NoiseNet::new(d, 32, 4, 30),
        },
        1,
    );
    let pc = ProxyConfig {
        hidden_units: 32,
        epochs: 5,
        ..ProxyConfig::default()
    };
    let x = rng::normal_array(&mut rng::stream(2, &[]), 200, d).map(|v| (0.4 * v).clamp(-1.0, 1.0));
    let y: Vec<f64> = x.iter_rows().map(|r| -r.iter().map(|v| v * v).sum::<f64>()).collect();
    let mut proxy = ProxyEnsemble::new(d, &pc, 3).unwrap();
    train_ensemble(&mut proxy, &x, &y, &vec![1.0 / 200.0; 200], &pc, 3).unwrap();
    let cands = x.slice_rows(0, 64);
    let cfg = SearchConfig {
        steps: 2,
        eta: 1e-3,
        beta: 1.0,
        ode: OdeConfig {
            n_steps: 10,
            grad_mode: GradMode::OdeFull,
            ..OdeConfig::default()
        },
        chunk: 8,
    };
    let score = || search_and_score(black_box(&cands), &prior, &proxy, &cfg, 7).unwrap();
    let train = || {
        let mut e = ProxyEnsemble::new(d, &pc, 4).unwrap();
        train_ensemble(&mut e, black_box(&x), &y, &vec![1.0 / 200.0; 200], &pc, 4).unwrap();
        e
    };

    let mut group = c.benchmark_group("search_and_score");
    group.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function("sequential", |b| b.iter(|| one.install(score)));
        group.bench_function("parallel", |b| b.iter(score));
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential", |b| b.iter(score));
    group.finish();

    let mut group = c.benchmark_group("train_ensemble");
    group.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function("sequential", |b| b.iter(|| one.install(train)));
        group.bench_function("parallel", |b| b.iter(train));
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential", |b| b.iter(train));
    group.finish();
}

criterion_group!(benches, workload);
criterion_main!(benches);
