//! Run output files and cross-seed curve aggregation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::TaskName;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optimizer::{RoundRecord, RunHistory};

pub const ROUNDS_HEADER: [&str; 8] = ["round", "evals", "best_y", "batch_best", "batch_mean", "rtb_loss", "logZ", "seconds"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub evals: usize,
    pub best_y: f64,
    pub batch_best: f64,
    pub batch_mean: f64,
    pub rtb_loss: f64,
    #[serde(rename = "logZ")]
    pub log_z: f64,
    pub seconds: f64,
}

impl From<&RoundRecord> for RoundRow {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            evals: r.evals,
            best_y: r.best_y,
            batch_best: r.batch_best,
            batch_mean: r.batch_mean,
            rtb_loss: r.rtb_loss,
            log_z: r.log_z,
            seconds: r.seconds,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub task: TaskName,
    pub dim: usize,
    pub seed: u64,
    pub best_y: f64,
    pub best_x: Vec<f64>,
    pub evals: usize,
    pub rounds: usize,
    pub total_seconds: f64,
    /// The initial design is charged to the evaluation budget.
    pub budget_includes_initial_design: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::File {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn rounds_csv(records: &[RoundRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(RoundRow::from(r))?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))
}

/// Writes `rounds.csv`, `summary.json` and `config.json` into `out_dir`.
pub fn write_history(history: &RunHistory, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    if history.records.is_empty() {
        return Err(Error::Empty("run history"));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let p = out_dir.join("rounds.csv");
    fs::write(&p, rounds_csv(&history.records)?).map_err(io_err(&p))?;
    let summary = Summary {
        task: cfg.task,
        dim: cfg.dim,
        seed: cfg.seed,
        best_y: history.best_y,
        best_x: history.best_x.clone(),
        evals: history.evals,
        rounds: history.records.len() - 1,
        total_seconds: history.total_seconds,
        budget_includes_initial_design: true,
    };
    let p = out_dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(io_err(&p))?;
    let p = out_dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg)?).map_err(io_err(&p))?;
    Ok(())
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != ROUNDS_HEADER {
        return Err(Error::invalid(format!("{}: unexpected header {header:?}", path.display())));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// One row of an aggregated curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub evals: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Best-so-far of a run at `evals`, holding the last value; `None` before
/// the first record.
fn value_at(rows: &[RoundRow], evals: usize) -> Option<f64> {
    rows.iter().take_while(|r| r.evals <= evals).last().map(|r| r.best_y)
}

/// Mean and population standard deviation of best-so-far across runs on
/// the union of their evaluation counts.
pub fn aggregate(runs: &[Vec<RoundRow>]) -> Vec<CurvePoint> {
    let mut grid: Vec<usize> = runs.iter().flatten().map(|r| r.evals).collect();
    grid.sort_unstable();
    grid.dedup();
    grid.into_iter()
        .filter_map(|e| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| value_at(r, e)).collect();
            if vals.is_empty() {
                return None;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Some(CurvePoint {
                evals: e,
                mean,
                std: var.sqrt(),
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                n: vals.len(),
            })
        })
        .collect()
}

fn read_config(dir: &Path) -> Result<RunConfig> {
    let p = dir.join("config.json");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    Ok(serde_json::from_str(&text)?)
}

/// Aggregates the runs in `run_dirs` into a curve CSV at `out`. All runs
/// must share the task and dimension.
pub fn emit_plot_data(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<CurvePoint>> {
    if run_dirs.is_empty() {
        return Err(Error::Empty("run directories"));
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    let mut task = None;
    for dir in run_dirs {
        let cfg = read_config(dir)?;
        match task {
            None => task = Some((cfg.task, cfg.dim)),
            Some(t) if t != (cfg.task, cfg.dim) => {
                return Err(Error::invalid(format!(
                    "{} holds {}-{}D but the first run is {}-{}D",
                    dir.display(),
                    cfg.task,
                    cfg.dim,
                    t.0,
                    t.1
                )));
            }
            Some(_) => {}
        }
        runs.push(read_rounds(&dir.join("rounds.csv"))?);
    }
    let curve = aggregate(&runs);
    let mut w = csv::Writer::from_path(out)?;
    for p in &curve {
        w.serialize(p)?;
    }
    w.flush().map_err(io_err(out))?;
    Ok(curve)
}
