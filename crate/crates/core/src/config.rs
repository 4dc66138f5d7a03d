//! Resolved run configuration and its profile defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bench::TaskName;
use crate::diffusion::ReverseVariance;
use crate::error::{Error, Result};
use crate::likelihood::GradMode;
use crate::proxy::WeightMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The full posterior-sampling loop.
    Dibo,
    /// Uniform random search over the box.
    Random,
    /// Samples straight from the trained prior; no proxy, fine-tuning,
    /// local search or filtering.
    PriorOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskName,
    pub dim: usize,
    pub seed: u64,
    pub budget: usize,
    pub batch: usize,
    pub init: usize,
    pub buffer: usize,
    pub profile: Profile,
    pub method: Method,
    pub reweight: bool,
    pub weight_mode: WeightMode,

    pub beta: f64,
    pub gamma: f64,
    pub local_steps: usize,
    pub eta: f64,
    pub candidates: usize,
    pub ode_steps: usize,
    pub ode_probes: usize,
    pub t_min: f64,
    pub grad_mode: GradMode,

    pub proxy_members: usize,
    pub proxy_hidden: usize,
    pub proxy_layers: usize,
    pub proxy_epochs: usize,
    pub proxy_lr: f64,
    pub proxy_batch: usize,

    pub diffusion_steps: usize,
    pub reverse_variance: ReverseVariance,
    pub prior_hidden: usize,
    pub prior_layers: usize,
    pub prior_epochs: usize,
    pub prior_lr: f64,
    pub prior_batch: usize,

    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub logz_lr: f64,
    pub finetune_batch: usize,
    pub off_policy_prob: f64,
    pub logz_warm_start: bool,

    /// Candidates per parallel local-search chunk.
    pub search_chunk: usize,
    /// Record wall-clock seconds per round; off for byte-identical logs.
    pub record_time: bool,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults from the published hyperparameter tables.
    pub fn paper(task: TaskName, dim: usize) -> Self {
        let large = dim >= 400;
        let epochs = if large { 100 } else { 50 };
        let batch = 100;
        Self {
            task,
            dim,
            seed: 0,
            budget: 10_000,
            batch,
            init: 200,
            buffer: if task == TaskName::Rastrigin { 1000 } else { 500 },
            profile: Profile::Paper,
            method: Method::Dibo,
            reweight: true,
            weight_mode: WeightMode::Standardized,
            beta: 1e5,
            gamma: 1.0,
            local_steps: if large { 15 } else { 10 },
            eta: 1e-2,
            candidates: batch * 100,
            ode_steps: 30,
            ode_probes: 1,
            t_min: 1e-3,
            grad_mode: GradMode::OdeFull,
            proxy_members: 5,
            proxy_hidden: if large { 512 } else { 256 },
            proxy_layers: 4,
            proxy_epochs: epochs,
            proxy_lr: 1e-3,
            proxy_batch: 256,
            diffusion_steps: 30,
            reverse_variance: ReverseVariance::Beta,
            prior_hidden: 512,
            prior_layers: 4,
            prior_epochs: epochs,
            prior_lr: 1e-3,
            prior_batch: 256,
            finetune_epochs: epochs,
            finetune_lr: 1e-4,
            logz_lr: 1e-2,
            finetune_batch: 256,
            off_policy_prob: 0.5,
            logz_warm_start: true,
            search_chunk: 32,
            record_time: true,
            out_dir: None,
        }
    }

    /// Laptop-scale settings with the paper's epoch counts.
    pub fn desk(task: TaskName, dim: usize) -> Self {
        let mut c = Self::paper(task, dim);
        c.profile = Profile::Desk;
        c.budget = 1000;
        c.batch = 20;
        c.init = 50;
        c.candidates = c.batch * 10;
        c.ode_steps = 20;
        c.ode_probes = 1;
        c.beta = 1.0;
        c.eta = 1e-3;
        c.proxy_hidden = 32;
        c.prior_hidden = 32;
        c.finetune_batch = 64;
        c
    }

    pub fn for_profile(profile: Profile, task: TaskName, dim: usize) -> Self {
        match profile {
            Profile::Paper => Self::paper(task, dim),
            Profile::Desk => Self::desk(task, dim),
        }
    }

    /// Every violated constraint, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        };
        positive("dim", self.dim);
        positive("budget", self.budget);
        positive("batch", self.batch);
        positive("init", self.init);
        positive("buffer", self.buffer);
        positive("candidates", self.candidates);
        positive("ode_probes", self.ode_probes);
        positive("proxy_members", self.proxy_members);
        positive("proxy_hidden", self.proxy_hidden);
        positive("proxy_layers", self.proxy_layers);
        positive("proxy_batch", self.proxy_batch);
        positive("prior_hidden", self.prior_hidden);
        positive("prior_layers", self.prior_layers);
        positive("prior_batch", self.prior_batch);
        positive("finetune_batch", self.finetune_batch);
        positive("search_chunk", self.search_chunk);
        if self.init > self.budget {
            errs.push(format!("init ({}) exceeds budget ({})", self.init, self.budget));
        }
        if self.candidates < self.batch {
            errs.push(format!("candidates ({}) must be at least batch ({})", self.candidates, self.batch));
        }
        if self.ode_steps < 4 {
            errs.push(format!("ode_steps must be at least 4, got {}", self.ode_steps));
        }
        if self.diffusion_steps <= 20 {
            errs.push(format!("diffusion_steps must exceed 20, got {}", self.diffusion_steps));
        }
        let mut pos_f = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive and finite, got {v}"));
            }
        };
        pos_f("beta", self.beta);
        pos_f("eta", self.eta);
        pos_f("proxy_lr", self.proxy_lr);
        pos_f("prior_lr", self.prior_lr);
        pos_f("finetune_lr", self.finetune_lr);
        pos_f("logz_lr", self.logz_lr);
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            errs.push(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            errs.push(format!("t_min must lie in (0, 1), got {}", self.t_min));
        }
        if !(0.0..=1.0).contains(&self.off_policy_prob) {
            errs.push(format!("off_policy_prob must lie in [0, 1], got {}", self.off_policy_prob));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Partial configuration from a JSON file or command-line flags. Unset
/// fields keep the value from the layer below.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[arg(long, value_parser = parse_name::<TaskName>)]
    pub task: Option<TaskName>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, value_parser = parse_name::<Profile>)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub init: Option<usize>,
    #[arg(long)]
    pub buffer: Option<usize>,
    #[arg(long, value_parser = parse_name::<Method>)]
    pub method: Option<Method>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub reweight: Option<bool>,
    #[arg(long, value_parser = parse_name::<WeightMode>)]
    pub weight_mode: Option<WeightMode>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub local_steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub ode_steps: Option<usize>,
    #[arg(long)]
    pub ode_probes: Option<usize>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long, value_parser = parse_name::<GradMode>)]
    pub grad_mode: Option<GradMode>,
    #[arg(long)]
    pub proxy_members: Option<usize>,
    #[arg(long)]
    pub proxy_hidden: Option<usize>,
    #[arg(long)]
    pub proxy_layers: Option<usize>,
    #[arg(long)]
    pub proxy_epochs: Option<usize>,
    #[arg(long)]
    pub proxy_lr: Option<f64>,
    #[arg(long)]
    pub proxy_batch: Option<usize>,
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    #[arg(long, value_parser = parse_name::<ReverseVariance>)]
    pub reverse_variance: Option<ReverseVariance>,
    #[arg(long)]
    pub prior_hidden: Option<usize>,
    #[arg(long)]
    pub prior_layers: Option<usize>,
    #[arg(long)]
    pub prior_epochs: Option<usize>,
    #[arg(long)]
    pub prior_lr: Option<f64>,
    #[arg(long)]
    pub prior_batch: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long)]
    pub logz_lr: Option<f64>,
    #[arg(long)]
    pub finetune_batch: Option<usize>,
    #[arg(long)]
    pub off_policy_prob: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub logz_warm_start: Option<bool>,
    #[arg(long)]
    pub search_chunk: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub record_time: Option<bool>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses a lowercase variant name the way the config file spells it.
pub fn parse_name<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

impl ConfigOverrides {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    fn apply(self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.budget {
            cfg.budget = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.init {
            cfg.init = v;
        }
        if let Some(v) = self.buffer {
            cfg.buffer = v;
        }
        if let Some(v) = self.method {
            cfg.method = v;
        }
        if let Some(v) = self.reweight {
            cfg.reweight = v;
        }
        if let Some(v) = self.weight_mode {
            cfg.weight_mode = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.local_steps {
            cfg.local_steps = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.candidates {
            cfg.candidates = v;
        }
        if let Some(v) = self.ode_steps {
            cfg.ode_steps = v;
        }
        if let Some(v) = self.ode_probes {
            cfg.ode_probes = v;
        }
        if let Some(v) = self.t_min {
            cfg.t_min = v;
        }
        if let Some(v) = self.grad_mode {
            cfg.grad_mode = v;
        }
        if let Some(v) = self.proxy_members {
            cfg.proxy_members = v;
        }
        if let Some(v) = self.proxy_hidden {
            cfg.proxy_hidden = v;
        }
        if let Some(v) = self.proxy_layers {
            cfg.proxy_layers = v;
        }
        if let Some(v) = self.proxy_epochs {
            cfg.proxy_epochs = v;
        }
        if let Some(v) = self.proxy_lr {
            cfg.proxy_lr = v;
        }
        if let Some(v) = self.proxy_batch {
            cfg.proxy_batch = v;
        }
        if let Some(v) = self.diffusion_steps {
            cfg.diffusion_steps = v;
        }
        if let Some(v) = self.reverse_variance {
            cfg.reverse_variance = v;
        }
        if let Some(v) = self.prior_hidden {
            cfg.prior_hidden = v;
        }
        if let Some(v) = self.prior_layers {
            cfg.prior_layers = v;
        }
        if let Some(v) = self.prior_epochs {
            cfg.prior_epochs = v;
        }
        if let Some(v) = self.prior_lr {
            cfg.prior_lr = v;
        }
        if let Some(v) = self.prior_batch {
            cfg.prior_batch = v;
        }
        if let Some(v) = self.finetune_epochs {
            cfg.finetune_epochs = v;
        }
        if let Some(v) = self.finetune_lr {
            cfg.finetune_lr = v;
        }
        if let Some(v) = self.logz_lr {
            cfg.logz_lr = v;
        }
        if let Some(v) = self.finetune_batch {
            cfg.finetune_batch = v;
        }
        if let Some(v) = self.off_policy_prob {
            cfg.off_policy_prob = v;
        }
        if let Some(v) = self.logz_warm_start {
            cfg.logz_warm_start = v;
        }
        if let Some(v) = self.search_chunk {
            cfg.search_chunk = v;
        }
        if let Some(v) = self.record_time {
            cfg.record_time = v;
        }
        if self.out_dir.is_some() {
            cfg.out_dir = self.out_dir;
        }
    }
}

/// Profile defaults, then the file layer, then the flag layer. Task, dim
/// and profile may come from either layer; the flag wins.
pub fn resolve(file: Option<ConfigOverrides>, flags: ConfigOverrides) -> Result<RunConfig> {
    let file = file.unwrap_or_default();
    let task = flags.task.or(file.task);
    let dim = flags.dim.or(file.dim);
    let profile = flags.profile.or(file.profile).unwrap_or(Profile::Desk);
    let mut missing = Vec::new();
    if task.is_none() {
        missing.push("task is required".to_owned());
    }
    if dim.is_none() {
        missing.push("dim is required".to_owned());
    }
    let (Some(task), Some(dim)) = (task, dim) else {
        return Err(Error::Config(missing));
    };
    let mut cfg = RunConfig::for_profile(profile, task, dim);
    file.apply(&mut cfg);
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_rastrigin_defaults() {
        let c = RunConfig::paper(TaskName::Rastrigin, 200);
        assert_eq!((c.beta, c.buffer, c.local_steps), (1e5, 1000, 10));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = RunConfig::desk(TaskName::Ackley, 10);
        c.batch = 0;
        c.eta = -1.0;
        c.init = 5000;
        match c.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
