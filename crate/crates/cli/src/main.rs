//! `hota`: train, evaluate and sweep value-function transport solvers.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::{resolve_problem, RunConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "hota", version, about = "Optimal stochastic transport via a learned HJB value function")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML file, preset name (`slit`, `sphere:5`, ...) or `opinion[:dim]`
    #[arg(long)]
    scenario: Option<String>,
    /// Full run configuration (as written to `config.toml` by `train`)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Dotted-path override, e.g. `train.batch=256` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Interpolated collocation points for every iteration
    #[arg(long)]
    no_buffer: bool,
    /// Fix the HJB gradient scale at 1
    #[arg(long)]
    no_grad_balance: bool,
    /// Single precision
    #[arg(long)]
    float32: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a value network
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint across seeds
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation seeds (comma separated)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Samples per evaluation
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train and evaluate once per value of a parameter
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `lambda_a`, `lambda_hjb` or any dotted config key
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
        /// Run the values concurrently
        #[arg(long)]
        parallel: bool,
    },
    /// Roll out the opinion population, with or without a trained control
    SimulateOpinion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => match &common.scenario {
            Some(_) => RunConfig::from_problem(None, None),
            None => bail!("either --scenario or --config is required"),
        },
    };
    if let Some(spec) = &common.scenario {
        let p = resolve_problem(spec)?;
        cfg.scenario = p.scenario;
        cfg.opinion = p.opinion;
    }
    for s in &common.sets {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        if let Some(o) = cfg.opinion.as_mut() {
            o.seed = seed;
        }
    }
    cfg.train.use_buffer &= !common.no_buffer;
    cfg.train.grad_balance &= !common.no_grad_balance;
    cfg.float32 |= common.float32;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HOTA_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("HOTA_THREADS={v}"))?;
        if n == 0 {
            bail!("HOTA_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn prepare(cli: &Cli) -> Result<RunConfig> {
    configure_threads()?;
    let cfg = match &cli.cmd {
        Cmd::Train { common } | Cmd::Sweep { common, .. } | Cmd::SimulateOpinion { common, .. } => resolve(common)?,
        Cmd::Eval { common, seeds, n, .. } => {
            let mut cfg = resolve(common)?;
            if let Some(s) = seeds {
                cfg.eval.seeds = s.clone();
            }
            if let Some(n) = n {
                cfg.eval.n = *n;
            }
            cfg
        }
    };
    cfg.validate()?;
    if let Cmd::Sweep { param, values, .. } = &cli.cmd {
        commands::sweep_configs(&cfg, param, values)?;
    }
    if let Cmd::SimulateOpinion { .. } = &cli.cmd {
        if cfg.opinion.is_none() {
            bail!("simulate-opinion needs --scenario opinion");
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match prepare(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("usage error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match &cli.cmd {
        Cmd::Train { common } => commands::cmd_train(&cfg, &common.out),
        Cmd::Eval { common, checkpoint, .. } => commands::cmd_eval(&cfg, checkpoint, &common.out),
        Cmd::Sweep { common, param, values, parallel } => {
            commands::cmd_sweep(&cfg, param, values, *parallel, &common.out)
        }
        Cmd::SimulateOpinion { common, checkpoint } => {
            commands::cmd_simulate_opinion(&cfg, checkpoint.as_deref(), &common.out)
        }
    };
    match result {
        Ok(Outcome::Completed) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(EXIT_DIVERGED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
