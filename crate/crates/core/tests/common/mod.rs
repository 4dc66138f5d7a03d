#![allow(dead_code)]

pub mod oracle;

use dibo::nd::NdArray;
use dibo::rng;
use rand::Rng;

/// Central differences of a scalar function, step `h`.
pub fn fd_grad(f: impl Fn(&NdArray) -> f64, x: &NdArray, h: f64) -> NdArray {
    let mut g = NdArray::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &NdArray, b: &NdArray, floor: f64) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).norm();
    diff / b.norm().max(floor)
}

pub fn uniform(seed: u64, rows: usize, cols: usize, lo: f64, hi: f64) -> NdArray {
    let mut r = rng::stream(seed, &[99]);
    NdArray::new(rows, cols, (0..rows * cols).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn normal(seed: u64, rows: usize, cols: usize, std: f64) -> NdArray {
    let mut r = rng::stream(seed, &[98]);
    rng::normal_array(&mut r, rows, cols).map(|v| v * std)
}

pub fn mean_std_cols(x: &NdArray) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// A run small enough for unit-speed tests.
pub fn toy(task: dibo::bench::TaskName, dim: usize) -> dibo::config::RunConfig {
    let mut c = dibo::config::RunConfig::desk(task, dim);
    c.budget = 30;
    c.init = 10;
    c.batch = 4;
    c.buffer = 16;
    c.candidates = 8;
    c.local_steps = 2;
    c.ode_steps = 4;
    c.proxy_members = 2;
    c.proxy_hidden = 8;
    c.proxy_epochs = 5;
    c.prior_hidden = 8;
    c.prior_epochs = 5;
    c.finetune_epochs = 3;
    c.finetune_batch = 8;
    c.record_time = false;
    c
}
