//! Opinion depolarization: a mean-field polarization drift driven by a
//! shared random stimulus, added to the controlled dynamics.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_with, Policy, TrajectoryBatch};
use crate::error::{HotaError, Result};
use crate::potentials::Marginal;
use crate::scalar::Real;
use crate::trainer::TransportProblem;
use crate::valuenet::ValueNet;

/// Population members shorter than this are skipped.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpinionConfig {
    pub dim: usize,
    pub sigma: f64,
    /// Variance of the first coordinate of α.
    pub alpha_first_var: f64,
    /// Variance of the remaining coordinates of α.
    pub alpha_rest_var: f64,
    /// Isotropic variance of β.
    pub beta_var: f64,
    /// Population size `m`.
    pub particles: usize,
    pub steps: usize,
    pub lambda_hjb: f64,
    pub lambda_a: f64,
    pub seed: u64,
}

impl Default for OpinionConfig {
    fn default() -> Self {
        OpinionConfig {
            dim: 50,
            sigma: 0.5,
            alpha_first_var: 4.0,
            alpha_rest_var: 0.25,
            beta_var: 4.0,
            particles: 256,
            steps: 30,
            lambda_hjb: 1.0,
            lambda_a: 0.0,
            seed: 0,
        }
    }
}

impl OpinionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HotaError::InvalidArgument(m.into()));
        if self.dim < 2 {
            return bad("opinion dim must be at least 2");
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be nonnegative");
        }
        let vars = [self.alpha_first_var, self.alpha_rest_var, self.beta_var];
        if vars.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("variances must be positive");
        }
        if self.particles == 0 || self.steps == 0 {
            return bad("particles and steps must be positive");
        }
        if !(self.lambda_hjb >= 0.0 && self.lambda_a >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        Ok(())
    }

    pub fn alpha(&self) -> Marginal {
        let mut var = vec![self.alpha_rest_var; self.dim];
        var[0] = self.alpha_first_var;
        Marginal::Gaussian {
            mean: vec![0.0; self.dim],
            var,
        }
    }

    pub fn beta(&self) -> Marginal {
        Marginal::Gaussian {
            mean: vec![0.0; self.dim],
            var: vec![self.beta_var; self.dim],
        }
    }
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |s, (&x, &y)| s + x * y)
}

/// `sign` with `sign(0) = +1`.
fn sgn<S: Real>(v: S) -> S {
    if v >= S::zero() {
        S::one()
    } else {
        -S::one()
    }
}

/// `+1` if `x` and `y` judge `ξ` the same way, `−1` otherwise.
pub fn agreement<S: Real>(x: &[S], y: &[S], xi: &[S]) -> i8 {
    if sgn(dot(x, xi)) == sgn(dot(y, xi)) {
        1
    } else {
        -1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolarizeDrift<S> {
    pub drift: Vec<S>,
    /// Members skipped for having near-zero norm.
    pub skipped: usize,
    /// Every member was skipped; the drift is zero.
    pub all_degenerate: bool,
}

/// `(1/m) Σ_j a(x, y_j, ξ) y_j / ‖y_j‖^{1/2}` over the population rows.
pub fn polarize_drift<S: Real>(x: &[S], pop: &[S], xi: &[S]) -> Result<PolarizeDrift<S>> {
    let d = x.len();
    if d == 0 || xi.len() != d || pop.is_empty() || pop.len() % d != 0 {
        return Err(HotaError::InvalidArgument(
            "polarize_drift needs matching nonempty dimensions".into(),
        ));
    }
    let m = pop.len() / d;
    let mut drift = vec![S::zero(); d];
    let mut skipped = 0;
    for y in pop.chunks(d) {
        let norm = dot(y, y).sqrt();
        if norm.f64() < DEGENERATE_NORM {
            skipped += 1;
            continue;
        }
        let c = S::lit(agreement(x, y, xi) as f64) / norm.sqrt();
        drift.iter_mut().zip(y).for_each(|(o, &v)| *o += c * v);
    }
    let inv = S::one() / S::of_usize(m);
    drift.iter_mut().for_each(|v| *v *= inv);
    Ok(PolarizeDrift {
        drift,
        skipped,
        all_degenerate: skipped == m,
    })
}

/// Adds the polarization drift of every particle in `states` to `out`.
///
/// Uses `a(x, y, ξ) = sgn(xᵀξ) sgn(yᵀξ)`, so the population sum is shared.
/// Returns the number of skipped members.
pub fn add_polarize_population<S: Real>(states: &[S], dim: usize, xi: &[S], out: &mut [S]) -> usize {
    let m = states.len() / dim;
    let mut shared = vec![S::zero(); dim];
    let mut skipped = 0;
    for y in states.chunks(dim) {
        let norm = dot(y, y).sqrt();
        if norm.f64() < DEGENERATE_NORM {
            skipped += 1;
            continue;
        }
        let c = sgn(dot(y, xi)) / norm.sqrt();
        shared.iter_mut().zip(y).for_each(|(o, &v)| *o += c * v);
    }
    let inv = S::one() / S::of_usize(m);
    shared.iter_mut().for_each(|v| *v *= inv);
    for (x, o) in states.chunks(dim).zip(out.chunks_mut(dim)) {
        let s = sgn(dot(x, xi));
        o.iter_mut().zip(&shared).for_each(|(o, &v)| *o += s * v);
    }
    skipped
}

#[derive(Clone, Debug)]
pub struct OpinionRun<S> {
    pub batch: TrajectoryBatch<S>,
    /// Index of the particle used as stimulus at each step.
    pub stimulus: Vec<usize>,
    /// Degenerate population members summed over steps.
    pub skipped: usize,
    /// Steps at which every member was degenerate.
    pub degenerate_steps: Vec<usize>,
}

/// Population rollout of `dx = v dt + f_polarize dt + σ dW` with one
/// stimulus per step drawn uniformly from the current particles.
pub fn simulate_opinion<S: Real>(
    policy: &impl Policy<S>,
    x0: &[S],
    steps: usize,
    sigma: S,
    seed: u64,
) -> Result<OpinionRun<S>> {
    let d = policy.dim();
    let mut stimulus = Vec::with_capacity(steps);
    let mut skipped = 0;
    let mut degenerate_steps = Vec::new();
    let batch = simulate_with(policy, x0, steps, sigma, seed, |i, cur, total, rng| {
        let m = cur.len() / d;
        let k = rng.random_range(0..m);
        let xi = cur[k * d..(k + 1) * d].to_vec();
        stimulus.push(k);
        let s = add_polarize_population(cur, d, &xi, total);
        skipped += s;
        if s == m {
            degenerate_steps.push(i);
        }
        Ok(())
    })?;
    Ok(OpinionRun {
        batch,
        stimulus,
        skipped,
        degenerate_steps,
    })
}

/// The opinion task as a transport problem with `U ≡ 0`.
#[derive(Clone, Debug)]
pub struct OpinionProblem {
    pub cfg: OpinionConfig,
    alpha: Marginal,
    beta: Marginal,
}

impl OpinionProblem {
    pub fn new(cfg: OpinionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OpinionProblem {
            alpha: cfg.alpha(),
            beta: cfg.beta(),
            cfg,
        })
    }
}

impl<S: Real> TransportProblem<S> for OpinionProblem {
    fn name(&self) -> &str {
        "opinion"
    }
    fn dim(&self) -> usize {
        self.cfg.dim
    }
    fn sigma(&self) -> f64 {
        self.cfg.sigma
    }
    fn lambda_hjb(&self) -> f64 {
        self.cfg.lambda_hjb
    }
    fn lambda_a(&self) -> f64 {
        self.cfg.lambda_a
    }
    fn sample_alpha(&self, n: usize, seed: u64) -> Result<Vec<S>> {
        nonempty(n)?;
        Ok(self.alpha.sample(n, seed))
    }
    fn sample_beta(&self, n: usize, seed: u64) -> Result<Vec<S>> {
        nonempty(n)?;
        Ok(self.beta.sample(n, seed))
    }
    fn potential(&self, points: &[S]) -> Result<Vec<S>> {
        Ok(vec![S::zero(); points.len() / self.cfg.dim])
    }
    fn rollout(&self, net: &ValueNet<S>, x0: &[S], steps: usize, seed: u64) -> Result<TrajectoryBatch<S>> {
        simulate_opinion(net, x0, steps, S::lit(self.cfg.sigma), seed).map(|r| r.batch)
    }
}

fn nonempty(n: usize) -> Result<()> {
    if n == 0 {
        return Err(HotaError::Empty("sample"));
    }
    Ok(())
}

/// Columns to show per particle in snapshots.
pub const SNAPSHOT_DIMS: usize = 8;

/// CSV `step,particle_id,x_1..x_k,norm` with `k = min(d, 8)`.
pub fn write_snapshot_csv<S: Real>(batch: &TrajectoryBatch<S>, mut w: impl Write) -> Result<()> {
    let d = batch.dim;
    let k = d.min(SNAPSHOT_DIMS);
    let cols: Vec<String> = (1..=k).map(|j| format!("x_{j}")).collect();
    writeln!(w, "step,particle_id,{},norm", cols.join(","))?;
    for i in 0..=batch.steps {
        for (p, x) in batch.step(i).chunks(d).enumerate() {
            write!(w, "{i},{p}")?;
            for v in &x[..k] {
                write!(w, ",{}", v.f64())?;
            }
            writeln!(w, ",{}", dot(x, x).sqrt().f64())?;
        }
    }
    Ok(())
}
