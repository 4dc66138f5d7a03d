use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use dibo::config::{resolve, ConfigOverrides};
use dibo::optimizer::run_with;
use dibo::report::{emit_plot_data, write_history};

#[derive(Parser)]
#[command(name = "dibo", version, about = "Batched black-box optimization with diffusion posterior sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization and write rounds.csv, summary.json and config.json.
    Run {
        /// JSON file with configuration fields; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Single-threaded with no wall-clock column, for byte-identical logs.
        #[arg(long)]
        deterministic: bool,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Aggregate best-so-far curves of several runs into one CSV.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads(deterministic: bool) -> anyhow::Result<()> {
    let threads = if deterministic {
        Some(1)
    } else {
        match std::env::var("DIBO_THREADS") {
            Ok(v) => Some(v.parse::<usize>().with_context(|| format!("DIBO_THREADS={v} is not a count"))?),
            Err(_) => None,
        }
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn run(config: Option<PathBuf>, deterministic: bool, dry_run: bool, overrides: ConfigOverrides) -> anyhow::Result<()> {
    let file = config
        .as_deref()
        .map(ConfigOverrides::from_file)
        .transpose()
        .context("reading config file")?;
    let mut cfg = resolve(file, overrides)?;
    if deterministic {
        cfg.record_time = false;
    }
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    if dry_run {
        return Ok(());
    }
    init_threads(deterministic)?;
    let out = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}d-seed{}", cfg.task, cfg.dim, cfg.seed)));
    log::info!("the initial design counts against the budget of {} evaluations", cfg.budget);
    let history = run_with(&cfg, |r| {
        println!(
            "round {:>3}  evals {:>6}  best {:>12.6}  batch best {:>12.6}",
            r.round, r.evals, r.best_y, r.batch_best
        )
    })?;
    write_history(&history, &cfg, &out).with_context(|| format!("writing {}", out.display()))?;
    println!("best_y {} after {} evaluations; output in {}", history.best_y, history.evals, out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            deterministic,
            dry_run,
            overrides,
        } => run(config, deterministic, dry_run, overrides),
        Command::Plot { runs, out } => emit_plot_data(&runs, &out)
            .map(|c| println!("wrote {} grid points to {}", c.len(), out.display()))
            .map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
