//! Synthetic test functions and the affine map into the model cube `[-1, 1]^D`.

use std::f64::consts::{E, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::NdArray;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Rastrigin,
    Ackley,
    Levy,
    Rosenbrock,
}

impl TaskName {
    pub const ALL: [TaskName; 4] = [TaskName::Rastrigin, TaskName::Ackley, TaskName::Levy, TaskName::Rosenbrock];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Rastrigin => "rastrigin",
            TaskName::Ackley => "ackley",
            TaskName::Levy => "levy",
            TaskName::Rosenbrock => "rosenbrock",
        }
    }

    pub fn bounds(self) -> (f64, f64) {
        match self {
            TaskName::Rastrigin => (-5.0, 5.0),
            TaskName::Ackley => (-5.0, 10.0),
            TaskName::Levy => (-10.0, 10.0),
            TaskName::Rosenbrock => (-5.0, 10.0),
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}` (expected rastrigin, ackley, levy or rosenbrock)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub dim: usize,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl TaskSpec {
    pub fn new(name: TaskName, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("task dimension must be at least 1"));
        }
        let (lo, hi) = name.bounds();
        Ok(Self {
            name,
            dim,
            lb: vec![lo; dim],
            ub: vec![hi; dim],
        })
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .map(|(&v, (&l, &u))| 2.0 * (v - l) / (u - l) - 1.0)
            .collect()
    }

    pub fn from_unit(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .map(|(&v, (&l, &u))| l + (v + 1.0) * 0.5 * (u - l))
            .collect()
    }

    /// Row-wise [`to_unit`](Self::to_unit).
    pub fn to_unit_rows(&self, x: &NdArray) -> NdArray {
        let mut out = x.clone();
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.to_unit(x.row(r)));
        }
        out
    }

    pub fn from_unit_rows(&self, z: &NdArray) -> NdArray {
        let mut out = z.clone();
        for r in 0..z.rows() {
            out.row_mut(r).copy_from_slice(&self.from_unit(z.row(r)));
        }
        out
    }

    /// The function to be minimized, in native coordinates.
    pub fn value(&self, x: &[f64]) -> f64 {
        match self.name {
            TaskName::Rastrigin => rastrigin(x),
            TaskName::Ackley => ackley(x),
            TaskName::Levy => levy(x),
            TaskName::Rosenbrock => rosenbrock(x),
        }
    }
}

pub fn rastrigin(x: &[f64]) -> f64 {
    10.0 * x.len() as f64 + x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum::<f64>()
}

pub fn ackley(x: &[f64]) -> f64 {
    let (a, b, c) = (20.0, 0.2, 2.0 * PI);
    let n = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let cs = x.iter().map(|v| (c * v).cos()).sum::<f64>() / n;
    -a * (-b * sq.sqrt()).exp() - cs.exp() + a + E
}

pub fn levy(x: &[f64]) -> f64 {
    let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
    let d = w.len();
    let head = (PI * w[0]).sin().powi(2);
    let mid: f64 = w[..d - 1]
        .iter()
        .map(|wi| (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2)))
        .sum();
    let wd = w[d - 1];
    let tail = (wd - 1.0).powi(2) * (1.0 + (2.0 * PI * wd).sin().powi(2));
    head + mid + tail
}

pub fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|p| 100.0 * (p[1] - p[0] * p[0]).powi(2) + (p[0] - 1.0).powi(2))
        .sum()
}

/// A task plus an exact count of evaluations. Scores are `-f(x)` so that
/// larger is always better.
#[derive(Debug)]
pub struct Objective {
    spec: TaskSpec,
    eval_count: AtomicU64,
}

impl Objective {
    pub fn new(spec: TaskSpec) -> Self {
        Self {
            spec,
            eval_count: AtomicU64::new(0),
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_count.load(Ordering::SeqCst)
    }

    /// Scores one native point. Out-of-bounds coordinates are clipped.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.spec.dim {
            return Err(Error::shape("evaluate", format!("point has {} coordinates, task has {}", x.len(), self.spec.dim)));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("objective queried with NaN"));
        }
        let mut clipped = false;
        let xc: Vec<f64> = x
            .iter()
            .zip(self.spec.lb.iter().zip(&self.spec.ub))
            .map(|(&v, (&l, &u))| {
                if v < l || v > u {
                    clipped = true;
                }
                v.clamp(l, u)
            })
            .collect();
        if clipped {
            log::warn!("{}: query outside bounds was clipped", self.spec.name);
        }
        self.eval_count.fetch_add(1, Ordering::SeqCst);
        Ok(-self.spec.value(&xc))
    }

    pub fn evaluate_rows(&self, x: &NdArray) -> Result<Vec<f64>> {
        x.iter_rows().map(|r| self.evaluate(r)).collect()
    }
}

/// `n` points drawn uniformly from the task box, in native coordinates.
pub fn initial_design(spec: &TaskSpec, n: usize, seed: u64) -> Result<NdArray> {
    if n == 0 {
        return Err(Error::invalid("initial design needs at least one point"));
    }
    let mut r = rng::stream(seed, &[rng::tag::INIT_DESIGN]);
    let mut x = NdArray::zeros(n, spec.dim);
    for i in 0..n {
        for (d, v) in x.row_mut(i).iter_mut().enumerate() {
            *v = r.random_range(spec.lb[d]..spec.ub[d]);
        }
    }
    Ok(x)
}
