mod common;

use common::{fd_grad, rel_err};
use dibo::nd::{grad, Eager, NdArray};
use dibo::proxy::{compute_weights, train_ensemble, ProxyConfig, ProxyEnsemble, RewardModel, WeightMode};
use dibo::rng;
use proptest::prelude::*;
use rand::Rng;

fn small(members: usize, epochs: usize) -> ProxyConfig {
    ProxyConfig {
        members,
        hidden_units: 16,
        num_layers: 2,
        epochs,
        lr: 1e-2,
        batch_size: 64,
        ..ProxyConfig::default()
    }
}

#[test]
fn weight_examples() {
    let w = compute_weights(&[2.0; 4], WeightMode::Standardized).unwrap();
    assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-15));
    let w = compute_weights(&[0.0, 3f64.ln()], WeightMode::Raw).unwrap();
    assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
    assert!(compute_weights(&[], WeightMode::Raw).is_err());
}

proptest! {
    #[test]
    fn weights_sum_to_one_and_ignore_shifts(ys in prop::collection::vec(-500.0f64..500.0, 1..40), c in -1e3f64..1e3) {
        for mode in [WeightMode::Standardized, WeightMode::Raw] {
            let w = compute_weights(&ys, mode).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            let shifted: Vec<f64> = ys.iter().map(|y| y + c).collect();
            let ws = compute_weights(&shifted, mode).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn single_point_overfit_in_target_units() {
    let cfg = small(2, 300);
    let mut e = ProxyEnsemble::new(2, &cfg, 1).unwrap();
    let x = NdArray::from_rows(&[[0.2, -0.4]]).unwrap();
    train_ensemble(&mut e, &x, &[3.5], &[1.0], &cfg, 1).unwrap();
    let p = e.predict_mean(&x).unwrap()[0];
    assert!((p - 3.5).abs() < 1e-2, "{p}");
}

#[test]
fn concentrated_weight_fits_its_point_first() {
    let x = common::uniform(3, 8, 2, -1.0, 1.0);
    let y: Vec<f64> = (0..8).map(|i| (i as f64 * 1.7).sin() * 3.0).collect();
    let mut w = vec![0.02; 8];
    w[5] = 1.0 - 0.02 * 7.0;
    let cfg = ProxyConfig {
        gamma: 0.0,
        ..small(1, 15)
    };
    let mut e = ProxyEnsemble::new(2, &cfg, 2).unwrap();
    train_ensemble(&mut e, &x, &y, &w, &cfg, 2).unwrap();
    let pred = e.predict_mean(&x).unwrap();
    let res: Vec<f64> = pred.iter().zip(&y).map(|(p, t)| (p - t).abs()).collect();
    let others = res.iter().enumerate().filter(|(i, _)| *i != 5).map(|(_, r)| *r).fold(0.0, f64::max);
    assert!(res[5] < others, "weighted residual {} vs worst other {}", res[5], others);
}

#[test]
fn single_member_without_bonus_is_the_mean() {
    let cfg = ProxyConfig {
        gamma: 0.0,
        ..small(1, 0)
    };
    let mut e = ProxyEnsemble::new(3, &cfg, 5).unwrap();
    e.gamma = 0.0;
    let x = common::uniform(1, 20, 3, -1.0, 1.0);
    let (mu, sigma, r) = e.predict_ucb(&Eager, &x).unwrap();
    assert_eq!(mu, r);
    assert!(sigma.data().iter().all(|s| *s == 0.0));
}

#[test]
fn identical_members_have_zero_spread() {
    let mut e = ProxyEnsemble::new(3, &small(3, 0), 5).unwrap();
    let first = e.members[0].clone();
    for m in &mut e.members {
        *m = first.clone();
    }
    let x = common::uniform(2, 10, 3, -1.0, 1.0);
    let (mu, sigma, r) = e.predict_ucb(&Eager, &x).unwrap();
    assert!(sigma.data().iter().all(|s| s.abs() < 1e-12));
    assert!(mu.max_abs_diff(&r) < 1e-12);
}

#[test]
fn reward_gradient_matches_differences() {
    let cfg = small(5, 20);
    let mut e = ProxyEnsemble::new(4, &cfg, 8).unwrap();
    let x = common::uniform(4, 40, 4, -1.0, 1.0);
    let y: Vec<f64> = x.iter_rows().map(|r| r.iter().map(|v| v.sin()).sum()).collect();
    train_ensemble(&mut e, &x, &y, &vec![1.0 / 40.0; 40], &cfg, 8).unwrap();
    let q = common::uniform(9, 3, 4, -0.9, 0.9);
    let g = grad(|xv| Ok(e.reward(xv.tape(), xv)?.sum()), &q).unwrap();
    let fd = fd_grad(|x| e.reward(&Eager, x).unwrap().sum(), &q, 1e-5);
    assert!(rel_err(&g, &fd, 1e-8) < 1e-4, "{}", rel_err(&g, &fd, 1e-8));
}

#[test]
fn ucb_argmax_reduces_to_mean_argmax() {
    let cfg = ProxyConfig {
        gamma: 0.0,
        ..small(4, 10)
    };
    let mut e = ProxyEnsemble::new(2, &cfg, 3).unwrap();
    let x = common::uniform(5, 30, 2, -1.0, 1.0);
    let y: Vec<f64> = x.iter_rows().map(|r| -(r[0] - 0.3).powi(2) - r[1].powi(2)).collect();
    train_ensemble(&mut e, &x, &y, &vec![1.0 / 30.0; 30], &cfg, 3).unwrap();
    let cands = common::uniform(6, 50, 2, -1.0, 1.0);
    let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let (mu, _, r) = e.predict_ucb(&Eager, &cands).unwrap();
    assert_eq!(argmax(r.data()), argmax(mu.data()));
}

#[test]
fn ensemble_is_less_certain_far_from_data() {
    let k = 5;
    let cfg = small(1, 200);
    let mut members = Vec::new();
    let mut noise = rng::stream(11, &[]);
    for m in 0..k {
        // Each member sees its own noisy replicate of one function.
        let x = common::uniform(100 + m as u64, 30, 1, -0.5, 0.5);
        let y: Vec<f64> = x.data().iter().map(|v| (3.0 * v).sin() + 0.05 * noise.random::<f64>()).collect();
        let mut e = ProxyEnsemble::new(1, &cfg, 100 + m as u64).unwrap();
        train_ensemble(&mut e, &x, &y, &vec![1.0 / 30.0; 30], &cfg, m as u64).unwrap();
        members.push(e);
    }
    let mut ens = members[0].clone();
    ens.members = members.iter().map(|e| e.members[0].clone()).collect();
    let near = common::uniform(1, 20, 1, -0.5, 0.5);
    let far = common::uniform(2, 20, 1, 2.0, 4.0);
    let median = |x: &NdArray| {
        let mut s = ens.predict_ucb(&Eager, x).unwrap().1.into_data();
        s.sort_by(f64::total_cmp);
        s[10]
    };
    assert!(median(&far) > median(&near), "far {} near {}", median(&far), median(&near));
}
