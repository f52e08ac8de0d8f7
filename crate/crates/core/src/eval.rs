//! Metrics: exact W₂² feasibility, integral trajectory cost, obstacle
//! violation and directional-similarity histograms.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, Policy, TrajectoryBatch};
use crate::error::{HotaError, Result};
use crate::potentials::Scenario;
use crate::scalar::Real;
use crate::trainer::TransportProblem;
use crate::valuenet::ValueNet;

/// Largest sample size solved by the exact assignment.
pub const EXACT_OT_MAX_N: usize = 4096;
/// Default number of histogram bins over `[−1, 1]`.
pub const DEFAULT_BINS: usize = 50;
/// Default evaluation sample size.
pub const DEFAULT_EVAL_N: usize = 1024;
/// Describes the feasibility number in reports.
pub const FEASIBILITY_METRIC: &str = "mean squared-Euclidean OT cost (W2^2 per point)";

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityResult {
    pub value: f64,
    /// `assignment[i]` is the target matched to source `i`.
    pub assignment: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalityResult {
    pub value: f64,
    pub kinetic: f64,
    pub potential: f64,
}

fn to_f64<S: Real>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

fn check_sets<S: Real>(a: &[S], b: &[S], dim: usize) -> Result<usize> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(HotaError::InvalidArgument(format!(
            "point sets are not multiples of dimension {dim}"
        )));
    }
    if a.len() != b.len() {
        return Err(HotaError::DimensionMismatch {
            expected: a.len() / dim,
            got: b.len() / dim,
        });
    }
    if a.is_empty() {
        return Err(HotaError::Empty("point set"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(HotaError::InvalidArgument("non-finite point".into()));
    }
    Ok(a.len() / dim)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn cost_matrix(a: &[f64], b: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        let x = &a[i * dim..(i + 1) * dim];
        for j in 0..n {
            c[i * n + j] = sq_dist(x, &b[j * dim..(j + 1) * dim]);
        }
    }
    c
}

fn mean_cost(c: &[f64], n: usize, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| c[i * n + j])
        .sum::<f64>()
        / n as f64
}

/// Minimum-cost perfect matching on a dense `n × n` matrix
/// (shortest augmenting paths with dual potentials).
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = free)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// `min_π (1/n) Σ ‖x_i − y_π(i)‖²` solved exactly.
pub fn w2_feasibility<S: Real>(pushforward: &[S], targets: &[S], dim: usize) -> Result<FeasibilityResult> {
    let n = check_sets(pushforward, targets, dim)?;
    if n > EXACT_OT_MAX_N {
        return Err(HotaError::InvalidArgument(format!(
            "{n} points exceed the exact regime ({EXACT_OT_MAX_N}); use w2_sinkhorn"
        )));
    }
    let c = cost_matrix(&to_f64(pushforward), &to_f64(targets), n, dim);
    let assignment = solve_assignment(&c, n);
    Ok(FeasibilityResult {
        value: mean_cost(&c, n, &assignment),
        assignment,
    })
}

/// Minimum over all `n!` permutations; only for tiny `n`.
pub fn w2_brute_force<S: Real>(a: &[S], b: &[S], dim: usize) -> Result<f64> {
    let n = check_sets(a, b, dim)?;
    if n > 10 {
        return Err(HotaError::InvalidArgument("brute force is limited to n ≤ 10".into()));
    }
    let c = cost_matrix(&to_f64(a), &to_f64(b), n, dim);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut counters = vec![0usize; n];
    best = best.min(mean_cost(&c, n, &perm));
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(mean_cost(&c, n, &perm));
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Transport cost `⟨P, C⟩` of the log-domain Sinkhorn plan with
/// regularization `epsilon` (absolute, in squared-distance units).
pub fn w2_sinkhorn<S: Real>(
    a: &[S],
    b: &[S],
    dim: usize,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<f64> {
    let n = check_sets(a, b, dim)?;
    if !(epsilon > 0.0) {
        return Err(HotaError::InvalidArgument("epsilon must be positive".into()));
    }
    let (a, b) = (to_f64(a), to_f64(b));
    let cost = |i: usize, j: usize| sq_dist(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]);
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    // one soft-min half step; returns the largest potential change
    let update = |out: &mut [f64], other: &[f64], transpose: bool| -> f64 {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let z = |j: usize| {
                let c = if transpose { cost(j, i) } else { cost(i, j) };
                (other[j] - c) / epsilon + log_w
            };
            let m = (0..n).map(z).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|j| (z(j) - m).exp()).sum();
            let new = -epsilon * (m + s.ln());
            change = change.max((new - out[i]).abs());
            out[i] = new;
        }
        change
    };
    for _ in 0..max_iter {
        update(&mut f, &g, false);
        if update(&mut g, &f, true) < tol {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = cost(i, j);
            total += ((f[i] + g[j] - c) / epsilon + 2.0 * log_w).exp() * c;
        }
    }
    Ok(total)
}

/// Left Riemann sum of `½‖v‖² + U` over the stored drifts and states.
pub fn integral_cost_of<S: Real>(batch: &TrajectoryBatch<S>, potential: impl Fn(&[S]) -> Result<Vec<S>>) -> Result<OptimalityResult> {
    let (n, d, steps) = (batch.n, batch.dim, batch.steps);
    let dt = 1.0 / steps as f64;
    let w = n * d;
    let mut kinetic = 0.0;
    let mut pot = 0.0;
    for i in 0..steps {
        let v = &batch.drifts[i * w..(i + 1) * w];
        kinetic += v.iter().map(|x| x.f64() * x.f64()).sum::<f64>() * 0.5 * dt;
        pot += potential(batch.step(i))?.iter().map(|u| u.f64()).sum::<f64>() * dt;
    }
    let kinetic = kinetic / n as f64;
    let potential = pot / n as f64;
    Ok(OptimalityResult {
        value: kinetic + potential,
        kinetic,
        potential,
    })
}

/// Optimality of `policy`: `n` rollouts from α with the scenario's σ.
pub fn integral_cost<S: Real>(
    policy: &impl Policy<S>,
    scn: &Scenario,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<OptimalityResult> {
    let x0 = scn.sample_alpha::<S>(n, seed)?;
    let batch = simulate(policy, &x0, steps, S::lit(scn.sigma), seed ^ ROLLOUT_SALT)?;
    integral_cost_of(&batch, |p| scn.eval_potential_batch(p))
}

const ROLLOUT_SALT: u64 = 0x5EED_0F_D1F7;
const BETA_SALT: u64 = 0xB37A_5A17;

/// Cost of moving each α sample straight to its index-paired β sample at
/// constant velocity, ignoring obstacles and noise.
pub fn straight_line_cost(scn: &Scenario, n: usize, steps: usize, seed: u64) -> Result<OptimalityResult> {
    if steps == 0 {
        return Err(HotaError::InvalidArgument("need at least one step".into()));
    }
    let d = scn.dim;
    let x0 = scn.sample_alpha::<f64>(n, seed)?;
    let y = scn.sample_beta::<f64>(n, seed ^ BETA_SALT)?;
    let mut states = Vec::with_capacity((steps + 1) * n * d);
    for i in 0..=steps {
        let s = i as f64 / steps as f64;
        states.extend(x0.iter().zip(&y).map(|(a, b)| a + s * (b - a)));
    }
    let v: Vec<f64> = x0.iter().zip(&y).map(|(a, b)| b - a).collect();
    let batch = TrajectoryBatch {
        n,
        dim: d,
        steps,
        states,
        drifts: v.repeat(steps),
    };
    integral_cost_of(&batch, |p| scn.eval_potential_batch(p))
}

/// Fraction of all stored states with `U(x) > threshold_frac · w`.
pub fn obstacle_violation<S: Real>(batch: &TrajectoryBatch<S>, scn: &Scenario, threshold_frac: f64) -> Result<f64> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(HotaError::InvalidArgument("threshold_frac must lie in (0, 1)".into()));
    }
    if batch.dim != scn.dim {
        return Err(HotaError::DimensionMismatch {
            expected: scn.dim,
            got: batch.dim,
        });
    }
    let level = threshold_frac * scn.weight;
    let u = scn.eval_potential_batch(&batch.states)?;
    let hits = u.iter().filter(|u| u.f64() > level).count();
    Ok(hits as f64 / u.len() as f64)
}

/// Equal-width histogram over `[−1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self, k: usize) -> (f64, f64) {
        let w = 2.0 / self.bins() as f64;
        (-1.0 + k as f64 * w, -1.0 + (k + 1) as f64 * w)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mass of bins lying entirely in `|c| ≥ level`.
    pub fn tail_mass(&self, level: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let tol = 1e-9;
        let hit: u64 = (0..self.bins())
            .filter(|&k| {
                let (lo, hi) = self.edges(k);
                lo >= level - tol || hi <= -level + tol
            })
            .map(|k| self.counts[k])
            .sum();
        hit as f64 / total as f64
    }

    /// CSV with columns `bin_lo,bin_hi,count`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "bin_lo,bin_hi,count")?;
        for (k, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.edges(k);
            writeln!(w, "{lo},{hi},{c}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub histogram: Histogram,
    /// Zero vectors left out of the pairs.
    pub excluded: usize,
}

/// Histogram of cosine similarities over all unordered pairs.
pub fn directional_similarity<S: Real>(points: &[S], dim: usize, bins: usize) -> Result<Similarity> {
    if dim == 0 || points.len() % dim != 0 || bins == 0 {
        return Err(HotaError::InvalidArgument("bad dimension or bin count".into()));
    }
    let n = points.len() / dim;
    if n < 2 {
        return Err(HotaError::InvalidArgument("need at least two vectors".into()));
    }
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut excluded = 0;
    for p in points.chunks(dim) {
        let v = to_f64(p);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(HotaError::InvalidArgument("non-finite vector".into()));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            excluded += 1;
            continue;
        }
        units.push(v.iter().map(|x| x / norm).collect());
    }
    let mut counts = vec![0u64; bins];
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            let c: f64 = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum();
            let k = (((c.clamp(-1.0, 1.0) + 1.0) / 2.0) * bins as f64) as usize;
            counts[k.min(bins - 1)] += 1;
        }
    }
    Ok(Similarity {
        histogram: Histogram { counts },
        excluded,
    })
}

/// One evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub seed: u64,
    pub feasibility: f64,
    pub optimality: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub violation_frac: f64,
    pub n: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub feasibility_metric: String,
}

/// Threshold (fraction of `w`) used for the violation diagnostic.
pub const VIOLATION_THRESHOLD: f64 = 0.5;

/// Feasibility, optimality and violation from one seeded rollout.
pub fn evaluate<S: Real>(
    policy: &impl Policy<S>,
    scn: &Scenario,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<MetricReport> {
    let x0 = scn.sample_alpha::<S>(n, seed)?;
    let y = scn.sample_beta::<S>(n, seed ^ BETA_SALT)?;
    let batch = simulate(policy, &x0, steps, S::lit(scn.sigma), seed ^ ROLLOUT_SALT)?;
    evaluate_batch(&batch, &y, scn, seed)
}

/// [`evaluate`] for any problem, using its own rollout.
pub fn evaluate_problem<S: Real, P: TransportProblem<S> + ?Sized>(
    net: &ValueNet<S>,
    problem: &P,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<MetricReport> {
    let x0 = problem.sample_alpha(n, seed)?;
    let y = problem.sample_beta(n, seed ^ BETA_SALT)?;
    let batch = problem.rollout(net, &x0, steps, seed ^ ROLLOUT_SALT)?;
    evaluate_batch(&batch, &y, problem, seed)
}

/// Metrics of an existing rollout against target samples `y`.
pub fn evaluate_batch<S: Real, P: TransportProblem<S> + ?Sized>(
    batch: &TrajectoryBatch<S>,
    y: &[S],
    problem: &P,
    seed: u64,
) -> Result<MetricReport> {
    let feas = w2_feasibility(batch.endpoints(), y, batch.dim)?;
    let cost = integral_cost_of(batch, |p| problem.potential(p))?;
    let w = problem.weight();
    let violation_frac = if w > 0.0 {
        let level = VIOLATION_THRESHOLD * w;
        let u = problem.potential(&batch.states)?;
        u.iter().filter(|u| u.f64() > level).count() as f64 / u.len() as f64
    } else {
        0.0
    };
    Ok(MetricReport {
        scenario: problem.name().to_string(),
        seed,
        feasibility: feas.value,
        optimality: cost.value,
        kinetic: cost.kinetic,
        potential: cost.potential,
        violation_frac,
        n: batch.n,
        steps: batch.steps,
        feasibility_metric: FEASIBILITY_METRIC.into(),
    })
}

/// Seed offset of the β sample drawn by [`evaluate`].
pub fn beta_seed(seed: u64) -> u64 {
    seed ^ BETA_SALT
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Mean and standard deviation of each metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub feasibility: MeanStd,
    pub optimality: MeanStd,
    pub kinetic: MeanStd,
    pub potential: MeanStd,
    pub violation_frac: MeanStd,
    pub feasibility_metric: String,
}

pub fn summarize(reports: &[MetricReport]) -> Result<ReportSummary> {
    let first = reports.first().ok_or(HotaError::Empty("report list"))?;
    let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(ReportSummary {
        scenario: first.scenario.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        feasibility: col(|r| r.feasibility),
        optimality: col(|r| r.optimality),
        kinetic: col(|r| r.kinetic),
        potential: col(|r| r.potential),
        violation_frac: col(|r| r.violation_frac),
        feasibility_metric: FEASIBILITY_METRIC.into(),
    })
}
