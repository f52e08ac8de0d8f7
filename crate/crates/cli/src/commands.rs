//! The `train`, `eval`, `sweep` and `simulate-opinion` commands.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use hota_core::dynamics::{write_trajectory_csv, ZeroPolicy};
use hota_core::eval::{
    beta_seed, directional_similarity, evaluate_problem, integral_cost_of, summarize, w2_feasibility,
    MetricReport, DEFAULT_BINS,
};
use hota_core::opinion::{simulate_opinion, write_snapshot_csv, OpinionProblem};
use hota_core::trainer::{train, Checkpoint, MetricsRow, TrainState, TransportProblem};
use hota_core::{HotaError, Real, ValueNet};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{write_atomic, write_json, write_jsonl, RunManifest};

/// How a command finished when it did not fail outright.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Diverged,
}

const PROGRESS_EVERY: usize = 1000;

fn problem<S: Real>(cfg: &RunConfig) -> Result<Box<dyn TransportProblem<S>>> {
    match (&cfg.scenario, &cfg.opinion) {
        (Some(s), None) => Ok(Box::new(s.clone())),
        (None, Some(o)) => Ok(Box::new(OpinionProblem::new(o.clone())?)),
        _ => bail!("config needs exactly one of [scenario] or [opinion]"),
    }
}

struct TrainResult<S> {
    rows: Vec<MetricsRow>,
    state: Result<TrainState<S>, HotaError>,
}

fn run_training<S: Real>(cfg: &RunConfig, quiet: bool) -> Result<TrainResult<S>> {
    let p = problem::<S>(cfg)?;
    let mut rows = Vec::new();
    let res = train::<S, _>(p.as_ref(), &cfg.train, |r| {
        if !quiet && r.step % PROGRESS_EVERY == 0 {
            eprintln!(
                "step {:>6}  pot {:+.5e}  hjb {:.5e}  alpha {:.3e}  lr {:.2e}",
                r.step, r.pot_loss, r.hjb_loss, r.alpha, r.lr
            );
        }
        rows.push(r.clone());
    });
    let state = match res {
        Ok((state, _)) => Ok(state),
        Err(e @ HotaError::Diverged { .. }) => Err(e),
        Err(e) => return Err(e.into()),
    };
    Ok(TrainResult { rows, state })
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    if cfg.float32 {
        train_as::<f32>(cfg, out)
    } else {
        train_as::<f64>(cfg, out)
    }
}

fn train_as<S: Real>(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let result = run_training::<S>(cfg, false)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_jsonl(&out.join("metrics.jsonl"), &result.rows)?;
    write_atomic(&out.join("config.toml"), |w| Ok(w.write_all(cfg.to_toml()?.as_bytes())?))?;
    let mut manifest = RunManifest::new("train", cfg, vec![cfg.train.seed], out);
    let state = match result.state {
        Ok(s) => s,
        Err(e) => {
            manifest.status = "diverged".into();
            manifest.error = Some(e.to_string());
            write_json(&out.join("manifest.json"), &manifest)?;
            eprintln!("{e}");
            return Ok(Outcome::Diverged);
        }
    };
    let ck = Checkpoint::from_state(&state);
    write_atomic(&out.join("checkpoint.bin"), |w| Ok(ck.write_to(w)?))?;
    let p = problem::<S>(cfg)?;
    let seed = cfg.eval.seeds[0];
    let x0 = p.sample_alpha(cfg.eval.n, seed)?;
    let batch = p.rollout(&state.online, &x0, cfg.eval_steps(), seed)?;
    write_atomic(&out.join("trajectories.csv"), |w| Ok(write_trajectory_csv(&batch, w)?))?;
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(Outcome::Completed)
}

fn load_net<S: Real>(cfg: &RunConfig, path: &Path) -> Result<ValueNet<S>> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let ck = Checkpoint::<S>::from_bytes(&bytes)?;
    Ok(ck.online_net(Some(&cfg.arch()?))?)
}

fn evaluate_seeds<S: Real>(cfg: &RunConfig, net: &ValueNet<S>) -> Result<Vec<MetricReport>> {
    let p = problem::<S>(cfg)?;
    cfg.eval
        .seeds
        .iter()
        .map(|&seed| Ok(evaluate_problem(net, p.as_ref(), cfg.eval.n, cfg.eval_steps(), seed)?))
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Outcome> {
    if cfg.float32 {
        eval_as::<f32>(cfg, checkpoint, out)
    } else {
        eval_as::<f64>(cfg, checkpoint, out)
    }
}

fn eval_as<S: Real>(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Outcome> {
    let net = load_net::<S>(cfg, checkpoint)?;
    let reports = evaluate_seeds(cfg, &net)?;
    let summary = summarize(&reports)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for r in &reports {
        write_json(&out.join(format!("report_seed{}.json", r.seed)), r)?;
    }
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("manifest.json"), &RunManifest::new("eval", cfg, cfg.eval.seeds.clone(), out))?;
    println!(
        "feasibility {:.6} ± {:.6}  optimality {:.4} ± {:.4}  violation {:.4}",
        summary.feasibility.mean,
        summary.feasibility.std,
        summary.optimality.mean,
        summary.optimality.std,
        summary.violation_frac.mean
    );
    Ok(Outcome::Completed)
}

/// Maps the short sweep names to config paths.
pub fn sweep_key(cfg: &RunConfig, param: &str) -> String {
    let section = if cfg.opinion.is_some() { "opinion" } else { "scenario" };
    match param {
        "lambda_a" | "lambda_hjb" => format!("{section}.{param}"),
        other => other.to_string(),
    }
}

#[derive(Debug, Serialize)]
struct SweepRow {
    param: String,
    value: f64,
    seed: u64,
    feasibility: f64,
    optimality: f64,
    diverged: bool,
}

/// Builds one validated config per value before any training starts.
pub fn sweep_configs(cfg: &RunConfig, param: &str, values: &[f64]) -> Result<Vec<RunConfig>> {
    if values.len() < 2 {
        bail!("a sweep needs at least two values");
    }
    let key = sweep_key(cfg, param);
    values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.apply_override(&format!("{key}={v:?}"))?;
            c.validate()?;
            Ok(c)
        })
        .collect()
}

pub fn cmd_sweep(cfg: &RunConfig, param: &str, values: &[f64], parallel: bool, out: &Path) -> Result<Outcome> {
    let configs = sweep_configs(cfg, param, values)?;
    let run = |(c, &v): (&RunConfig, &f64)| -> Result<(SweepRow, Vec<MetricsRow>)> {
        let (rows, reports) = if c.float32 { sweep_one::<f32>(c)? } else { sweep_one::<f64>(c)? };
        let diverged = reports.is_none();
        let (feasibility, optimality) = match reports {
            Some(r) => {
                let s = summarize(&r)?;
                (s.feasibility.mean, s.optimality.mean)
            }
            None => (f64::NAN, f64::NAN),
        };
        eprintln!("{param}={v}: feasibility {feasibility:.6} optimality {optimality:.4} diverged {diverged}");
        let row = SweepRow {
            param: param.to_string(),
            value: v,
            seed: c.train.seed,
            feasibility,
            optimality,
            diverged,
        };
        Ok((row, rows))
    };
    let results: Vec<(SweepRow, Vec<MetricsRow>)> = if parallel {
        configs.par_iter().zip(values.par_iter()).map(run).collect::<Result<_>>()?
    } else {
        configs.iter().zip(values).map(run).collect::<Result<_>>()?
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (k, (_, rows)) in results.iter().enumerate() {
        let dir = out.join(format!("run{k}"));
        fs::create_dir_all(&dir)?;
        write_jsonl(&dir.join("metrics.jsonl"), rows)?;
    }
    write_atomic(&out.join("sweep.csv"), |w| {
        writeln!(w, "param,value,seed,feasibility,optimality,diverged")?;
        for (r, _) in &results {
            writeln!(w, "{},{},{},{},{},{}", r.param, r.value, r.seed, r.feasibility, r.optimality, r.diverged)?;
        }
        Ok(())
    })?;
    write_json(&out.join("manifest.json"), &RunManifest::new("sweep", cfg, vec![cfg.train.seed], out))?;
    Ok(Outcome::Completed)
}

/// Trains and evaluates one configuration; `None` reports mean divergence.
fn sweep_one<S: Real>(cfg: &RunConfig) -> Result<(Vec<MetricsRow>, Option<Vec<MetricReport>>)> {
    let result = run_training::<S>(cfg, true)?;
    match result.state {
        Ok(state) => match evaluate_seeds(cfg, &state.online) {
            Ok(r) => Ok((result.rows, Some(r))),
            Err(e) => match e.downcast_ref::<HotaError>() {
                Some(HotaError::NonFiniteState { .. }) => Ok((result.rows, None)),
                _ => Err(e),
            },
        },
        Err(_) => Ok((result.rows, None)),
    }
}

#[derive(Debug, Serialize)]
struct OpinionReport {
    dim: usize,
    particles: usize,
    steps: usize,
    sigma: f64,
    controlled: bool,
    w2_to_beta: f64,
    kinetic: f64,
    polarized_mass_initial: f64,
    polarized_mass_terminal: f64,
    excluded_zero_vectors: usize,
    skipped_members: usize,
    degenerate_steps: Vec<usize>,
    feasibility_metric: String,
}

/// `|cos|` level used to call a pair polarized.
const POLARIZED_COS: f64 = 0.8;

pub fn cmd_simulate_opinion(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Outcome> {
    if cfg.float32 {
        opinion_as::<f32>(cfg, checkpoint, out)
    } else {
        opinion_as::<f64>(cfg, checkpoint, out)
    }
}

fn opinion_as<S: Real>(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Outcome> {
    let Some(oc) = &cfg.opinion else {
        bail!("simulate-opinion needs the opinion scenario (--scenario opinion)");
    };
    let net = checkpoint.map(|p| load_net::<S>(cfg, p)).transpose()?;
    let p = OpinionProblem::new(oc.clone())?;
    let x0: Vec<S> = TransportProblem::<S>::sample_alpha(&p, oc.particles, oc.seed)?;
    let sigma = S::lit(oc.sigma);
    let run = match &net {
        Some(n) => simulate_opinion(n, &x0, oc.steps, sigma, oc.seed)?,
        None => simulate_opinion(&ZeroPolicy(oc.dim), &x0, oc.steps, sigma, oc.seed)?,
    };
    let y: Vec<S> = TransportProblem::<S>::sample_beta(&p, oc.particles, beta_seed(oc.seed))?;
    let w2 = w2_feasibility(run.batch.endpoints(), &y, oc.dim)?.value;
    let kinetic = integral_cost_of(&run.batch, |pts| Ok(vec![S::zero(); pts.len() / oc.dim]))?.kinetic;
    let first = directional_similarity(&x0, oc.dim, DEFAULT_BINS)?;
    let last = directional_similarity(run.batch.endpoints(), oc.dim, DEFAULT_BINS)?;
    let report = OpinionReport {
        dim: oc.dim,
        particles: oc.particles,
        steps: oc.steps,
        sigma: oc.sigma,
        controlled: net.is_some(),
        w2_to_beta: w2,
        kinetic,
        polarized_mass_initial: first.histogram.tail_mass(POLARIZED_COS),
        polarized_mass_terminal: last.histogram.tail_mass(POLARIZED_COS),
        excluded_zero_vectors: last.excluded,
        skipped_members: run.skipped,
        degenerate_steps: run.degenerate_steps.clone(),
        feasibility_metric: hota_core::eval::FEASIBILITY_METRIC.into(),
    };
    if !run.degenerate_steps.is_empty() {
        eprintln!("warning: every particle was degenerate at steps {:?}", run.degenerate_steps);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("snapshots.csv"), |w| Ok(write_snapshot_csv(&run.batch, w)?))?;
    write_atomic(&out.join("similarity_initial.csv"), |w| Ok(first.histogram.write_csv(w)?))?;
    write_atomic(&out.join("similarity_terminal.csv"), |w| Ok(last.histogram.write_csv(w)?))?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("manifest.json"), &RunManifest::new("simulate-opinion", cfg, vec![oc.seed], out))?;
    println!(
        "W2^2 to beta {:.4}  polarized pair mass {:.3} -> {:.3}",
        report.w2_to_beta, report.polarized_mass_initial, report.polarized_mass_terminal
    );
    Ok(Outcome::Completed)
}
