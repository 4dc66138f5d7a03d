mod common;

use common::{fd_grad, rel_err};
use dibo::nd::{adam_step, grad, vjp, AdamConfig, AdamState, NdArray, ParamSet, Tape, Var};
use dibo::nn::{mlp_forward, MlpSpec};
use dibo::rng;
use dibo::Result;
use proptest::prelude::*;

fn random_mlp(seed: u64, d: usize, hidden: usize, layers: usize, ln: bool) -> (MlpSpec, ParamSet) {
    let spec = MlpSpec::new(d, 2, hidden, layers).with_layer_norm(ln);
    let params = spec.init(&mut rng::stream(seed, &[1]), false);
    (spec, params)
}

/// A smooth scalar composition: MLP, then a few pointwise primitives.
fn composition(tape: &Tape, spec: &MlpSpec, params: &ParamSet, x: &Var) -> Result<Var> {
    let p: Vec<Var> = params.blocks().iter().map(|b| tape.constant(b.clone())).collect();
    let y = mlp_forward(tape, spec, &p, x)?;
    let a = y.square().offset(1.0).sqrt();
    let b = y.scale(0.3).exp();
    Ok(a.mul(&b).add(&y.powf(2.0).scale(0.1)).sum())
}

fn value(spec: &MlpSpec, params: &ParamSet, x: &NdArray) -> f64 {
    let tape = Tape::new();
    composition(&tape, spec, params, &tape.constant(x.clone())).unwrap().value().item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_matches_central_differences(seed in 0u64..10_000, d in 1usize..=8, layers in 1usize..=3, ln in any::<bool>()) {
        let (spec, params) = random_mlp(seed, d, 6, layers, ln);
        let x = common::uniform(seed, 3, d, -1.0, 1.0);
        let g = grad(|x| composition(x.tape(), &spec, &params, x), &x).unwrap();
        let fd = fd_grad(|x| value(&spec, &params, x), &x, 1e-5);
        prop_assert!(rel_err(&g, &fd, 1e-6) < 1e-5, "rel err {}", rel_err(&g, &fd, 1e-6));
    }

    #[test]
    fn stacked_vjps_rebuild_the_jacobian(seed in 0u64..10_000, d in 1usize..=6) {
        let (spec, params) = random_mlp(seed, d, 5, 2, false);
        let x = common::uniform(seed, 1, d, -1.0, 1.0);
        let f = |x: &Var| {
            let p: Vec<Var> = params.blocks().iter().map(|b| x.tape().constant(b.clone())).collect();
            mlp_forward(x.tape(), &spec, &p, x)
        };
        for i in 0..2 {
            let mut e = NdArray::zeros(1, 2);
            e.set(0, i, 1.0);
            let row = vjp(f, &x, &e).unwrap();
            let fd = fd_grad(|x| {
                let tape = Tape::new();
                f(&tape.constant(x.clone())).unwrap().value().get(0, i)
            }, &x, 1e-5);
            prop_assert!(rel_err(&row, &fd, 1e-6) < 1e-5);
        }
    }

    #[test]
    fn nested_grad_of_vjp_matches_differences(seed in 0u64..10_000, d in 1usize..=4) {
        let spec = MlpSpec::new(d, d, 5, 2).with_layer_norm(true);
        let params = spec.init(&mut rng::stream(seed, &[2]), false);
        let probe = common::uniform(seed + 1, 2, d, -1.0, 1.0).map(f64::signum);
        let x = common::uniform(seed, 2, d, -1.0, 1.0);
        // h(x) = Σ probe ⊙ (probeᵀ ∂f/∂x), a Hutchinson-style quantity.
        let h_graph = |tape: &Tape, x: &Var| -> Result<Var> {
            let p: Vec<Var> = params.blocks().iter().map(|b| tape.constant(b.clone())).collect();
            let y = mlp_forward(tape, &spec, &p, x)?;
            let v = y.vjp_graph(x, &probe)?;
            Ok(v.mul(&tape.constant(probe.clone())).sum())
        };
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let h = h_graph(&tape, &xv).unwrap();
        let g = tape.backward(&h, None, &[&xv]).unwrap().remove(0);
        let fd = fd_grad(|x| {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            h_graph(&tape, &xv).unwrap().value().item()
        }, &x, 1e-5);
        prop_assert!(rel_err(&g, &fd, 1e-6) < 1e-4, "rel err {}", rel_err(&g, &fd, 1e-6));
    }
}

#[test]
fn spec_examples() {
    let x = NdArray::row_vector(&[1.0, 2.0]);
    let g = grad(|x| Ok(x.square().sum()), &x).unwrap();
    assert_eq!(g.data(), &[2.0, 4.0]);

    let g = grad(|x| Ok(x.tape().constant(NdArray::scalar(3.0)).add(&x.scale(0.0).sum())), &x).unwrap();
    assert_eq!(g.data(), &[0.0, 0.0]);

    let a = NdArray::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let v = vjp(
        |x| Ok(x.tape().constant(a.clone()).matmul(&x.reshape(2, 1), false, false).reshape(1, 2)),
        &NdArray::row_vector(&[1.0, 1.0]),
        &NdArray::row_vector(&[1.0, 0.0]),
    )
    .unwrap();
    assert_eq!(v.data(), &[1.0, 2.0]);

    let cot = NdArray::row_vector(&[0.3, -2.0]);
    assert_eq!(vjp(|x| Ok(x.clone()), &x, &cot).unwrap(), cot);
    let v = vjp(|x| Ok(x.square()), &NdArray::scalar(3.0), &NdArray::scalar(1.0)).unwrap();
    assert_eq!(v.item(), 6.0);
}

#[test]
fn replay_is_bitwise_deterministic() {
    let (spec, params) = random_mlp(5, 4, 8, 3, true);
    let x = common::uniform(5, 7, 4, -1.0, 1.0);
    let g1 = grad(|x| composition(x.tape(), &spec, &params, x), &x).unwrap();
    let g2 = grad(|x| composition(x.tape(), &spec, &params, x), &x).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn adam_examples() {
    let mut p = ParamSet::new();
    p.push("w", NdArray::scalar(1.0));
    let mut cfg = AdamConfig::with_lr(0.1);
    cfg.eps = 0.0;
    let mut state = AdamState::new(&p, cfg);
    adam_step(&mut p, &[NdArray::scalar(4.0)], &mut state).unwrap();
    assert!((p.get(0).item() - 0.9).abs() < 1e-12);
    adam_step(&mut p, &[NdArray::scalar(4.0)], &mut state).unwrap();
    assert!((p.get(0).item() - 0.8).abs() < 1e-12);
    assert_eq!(state.step, 2);

    let before = p.clone();
    let mut state = AdamState::new(&p, AdamConfig::default());
    adam_step(&mut p, &[NdArray::scalar(0.0)], &mut state).unwrap();
    assert_eq!(p, before);

    let err = adam_step(&mut p, &[NdArray::scalar(f64::NAN)], &mut state).unwrap_err();
    assert!(err.to_string().contains('w'), "{err}");
}
