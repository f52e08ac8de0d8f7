//! Euler–Maruyama rollouts under the policy `v = −∇x s`, the straight-line
//! warmup sampler and the replay buffer of visited `(t, x)` points.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{HotaError, Result};
use crate::scalar::Real;
use crate::valuenet::ValueNet;

pub const DEFAULT_STEPS: usize = 30;
pub const DEFAULT_BUFFER_CAPACITY: usize = 50_000;

/// Anything that can produce the control drift for a batch of points
/// sharing one time.
pub trait Policy<S: Real>: Sync {
    fn dim(&self) -> usize;

    /// Writes the drift at every row of `points` into `out`.
    fn drift_batch(&self, t: S, points: &[S], out: &mut [S]) -> Result<()>;
}

impl<S: Real> Policy<S> for ValueNet<S> {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn drift_batch(&self, t: S, points: &[S], out: &mut [S]) -> Result<()> {
        let g = self.grad_at_time(t, points)?;
        out.iter_mut().zip(&g).for_each(|(o, gi)| *o = -*gi);
        Ok(())
    }
}

/// No control at all.
#[derive(Clone, Copy, Debug)]
pub struct ZeroPolicy(pub usize);

impl<S: Real> Policy<S> for ZeroPolicy {
    fn dim(&self) -> usize {
        self.0
    }

    fn drift_batch(&self, _t: S, _points: &[S], out: &mut [S]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = S::zero());
        Ok(())
    }
}

/// Policy of an analytic value function given by its spatial gradient.
pub struct GradientField<F> {
    pub dim: usize,
    pub grad: F,
}

impl<S: Real, F> Policy<S> for GradientField<F>
where
    F: Fn(S, &[S], &mut [S]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift_batch(&self, t: S, points: &[S], out: &mut [S]) -> Result<()> {
        for (x, o) in points.chunks(self.dim).zip(out.chunks_mut(self.dim)) {
            (self.grad)(t, x, o);
            o.iter_mut().for_each(|v| *v = -*v);
        }
        Ok(())
    }
}

/// `−∇x s(t, x)` at a single point.
pub fn drift<S: Real>(policy: &impl Policy<S>, t: S, x: &[S]) -> Result<Vec<S>> {
    if x.len() != policy.dim() {
        return Err(HotaError::DimensionMismatch {
            expected: policy.dim(),
            got: x.len(),
        });
    }
    let mut out = vec![S::zero(); x.len()];
    policy.drift_batch(t, x, &mut out)?;
    Ok(out)
}

/// One path on the uniform grid `t_i = i / T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    pub times: Vec<S>,
    /// `(T + 1) × d`, row-major.
    pub states: Vec<S>,
}

impl<S: Real> Trajectory<S> {
    pub fn state(&self, i: usize) -> &[S] {
        let d = self.states.len() / self.times.len();
        &self.states[i * d..(i + 1) * d]
    }
}

/// `n` paths of `T + 1` states stored step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch<S> {
    pub n: usize,
    pub dim: usize,
    pub steps: usize,
    /// `states[(i * n + k) * d + j]` is coordinate `j` of path `k` at step `i`.
    pub states: Vec<S>,
    /// Control drift used at each step `i < T`, same layout without the last step.
    pub drifts: Vec<S>,
}

impl<S: Real> TrajectoryBatch<S> {
    pub fn time(&self, i: usize) -> S {
        S::of_usize(i) / S::of_usize(self.steps)
    }

    /// All `n` states at step `i`.
    pub fn step(&self, i: usize) -> &[S] {
        let w = self.n * self.dim;
        &self.states[i * w..(i + 1) * w]
    }

    pub fn endpoints(&self) -> &[S] {
        self.step(self.steps)
    }

    pub fn trajectory(&self, k: usize) -> Trajectory<S> {
        let d = self.dim;
        let mut states = Vec::with_capacity((self.steps + 1) * d);
        for i in 0..=self.steps {
            states.extend_from_slice(&self.step(i)[k * d..(k + 1) * d]);
        }
        Trajectory {
            times: (0..=self.steps).map(|i| self.time(i)).collect(),
            states,
        }
    }
}

/// Euler–Maruyama: `x_{i+1} = x_i + v(t_i, x_i) Δt + σ √Δt ξ_i`.
pub fn simulate<S: Real>(
    policy: &impl Policy<S>,
    x0: &[S],
    steps: usize,
    sigma: S,
    seed: u64,
) -> Result<TrajectoryBatch<S>> {
    simulate_with(policy, x0, steps, sigma, seed, |_, _, _, _| Ok(()))
}

/// [`simulate`] with an additional drift `extra(step, states, drift, rng)`
/// that may read the whole population and add to the drift in place.
pub fn simulate_with<S, F>(
    policy: &impl Policy<S>,
    x0: &[S],
    steps: usize,
    sigma: S,
    seed: u64,
    mut extra: F,
) -> Result<TrajectoryBatch<S>>
where
    S: Real,
    F: FnMut(usize, &[S], &mut [S], &mut ChaCha8Rng) -> Result<()>,
{
    let d = policy.dim();
    if steps == 0 {
        return Err(HotaError::InvalidArgument("need at least one step".into()));
    }
    if !(sigma >= S::zero()) {
        return Err(HotaError::InvalidArgument("sigma must be nonnegative".into()));
    }
    if x0.is_empty() || x0.len() % d != 0 {
        return Err(HotaError::DimensionMismatch {
            expected: d,
            got: x0.len() % d,
        });
    }
    let n = x0.len() / d;
    let w = n * d;
    let dt = S::one() / S::of_usize(steps);
    let noise = sigma * dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity((steps + 1) * w);
    states.extend_from_slice(x0);
    let mut drifts = vec![S::zero(); steps * w];
    let mut total = vec![S::zero(); w];
    for i in 0..steps {
        let t = S::of_usize(i) / S::of_usize(steps);
        let cur = &states[i * w..(i + 1) * w];
        let ctrl = &mut drifts[i * w..(i + 1) * w];
        policy.drift_batch(t, cur, ctrl)?;
        total.copy_from_slice(ctrl);
        extra(i, cur, &mut total, &mut rng)?;
        let mut next = Vec::with_capacity(w);
        for (x, v) in cur.iter().zip(&total) {
            let xi: f64 = rng.sample(StandardNormal);
            next.push(*x + *v * dt + noise * S::lit(xi));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(HotaError::NonFiniteState { step: i + 1 });
        }
        states.extend_from_slice(&next);
    }
    Ok(TrajectoryBatch {
        n,
        dim: d,
        steps,
        states,
        drifts,
    })
}

/// Straight-line interpolants `x = x0 (1 − t) + y t` at the given times.
pub fn interpolate_at<S: Real>(x0: &[S], y: &[S], times: &[S]) -> Result<Vec<S>> {
    if x0.len() != y.len() {
        return Err(HotaError::DimensionMismatch {
            expected: x0.len(),
            got: y.len(),
        });
    }
    if times.is_empty() || x0.len() % times.len() != 0 {
        return Err(HotaError::DimensionMismatch {
            expected: times.len(),
            got: x0.len(),
        });
    }
    let d = x0.len() / times.len();
    Ok(x0
        .chunks(d)
        .zip(y.chunks(d))
        .zip(times)
        .flat_map(|((a, b), &t)| {
            a.iter()
                .zip(b)
                .map(move |(&ai, &bi)| ai * (S::one() - t) + bi * t)
        })
        .collect())
}

/// Warmup collocation points: `t ~ U(0, 1)` and the straight-line interpolant.
pub fn interpolate_warmup<S: Real>(
    x0: &[S],
    y: &[S],
    dim: usize,
    seed: u64,
) -> Result<(Vec<S>, Vec<S>)> {
    if dim == 0 || x0.len() % dim != 0 {
        return Err(HotaError::InvalidArgument("batch is not a multiple of dim".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<S> = (0..x0.len() / dim)
        .map(|_| S::lit(rng.random::<f64>()))
        .collect();
    let points = interpolate_at(x0, y, &times)?;
    Ok((times, points))
}

/// FIFO store of visited `(t, x)` pairs.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<S> {
    capacity: usize,
    dim: usize,
    times: VecDeque<S>,
    points: VecDeque<S>,
}

impl<S: Real> ReplayBuffer<S> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        ReplayBuffer {
            capacity,
            dim,
            times: VecDeque::with_capacity(capacity.min(1 << 16)),
            points: VecDeque::with_capacity((capacity * dim).min(1 << 20)),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts one pair, evicting the oldest when full.
    pub fn push_point(&mut self, t: S, x: &[S]) -> Result<()> {
        if x.len() != self.dim {
            return Err(HotaError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.times.len() == self.capacity {
            self.times.pop_front();
            self.points.drain(..self.dim);
        }
        self.times.push_back(t);
        self.points.extend(x.iter().copied());
        Ok(())
    }

    /// Inserts all `T + 1` states of a trajectory.
    pub fn push(&mut self, traj: &Trajectory<S>) -> Result<()> {
        for (i, &t) in traj.times.iter().enumerate() {
            self.push_point(t, traj.state(i))?;
        }
        Ok(())
    }

    /// `n` pairs drawn uniformly with replacement.
    pub fn sample(&self, n: usize, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
        if self.is_empty() {
            return Err(HotaError::Empty("replay buffer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim;
        let mut times = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = rng.random_range(0..self.len());
            times.push(self.times[k]);
            points.extend((0..d).map(|j| self.points[k * d + j]));
        }
        Ok((times, points))
    }
}

/// Writes `traj_id, step, t, x_1..x_d` rows.
pub fn write_trajectory_csv<S: Real, W: Write>(batch: &TrajectoryBatch<S>, mut out: W) -> Result<()> {
    write!(out, "traj_id,step,t")?;
    for j in 1..=batch.dim {
        write!(out, ",x_{j}")?;
    }
    writeln!(out)?;
    for k in 0..batch.n {
        for i in 0..=batch.steps {
            write!(out, "{k},{i},{}", batch.time(i))?;
            for v in &batch.step(i)[k * batch.dim..(k + 1) * batch.dim] {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Parses the format written by [`write_trajectory_csv`].
pub fn read_trajectory_csv<S: Real>(text: &str) -> Result<TrajectoryBatch<S>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(HotaError::Empty("trajectory csv"))?;
    let dim = header.split(',').count().saturating_sub(3);
    if dim == 0 {
        return Err(HotaError::Format("missing coordinate columns".into()));
    }
    let mut rows: Vec<(usize, usize, Vec<S>)> = Vec::new();
    for (ln, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != dim + 3 {
            return Err(HotaError::Format(format!("line {}: wrong field count", ln + 2)));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| HotaError::Format(format!("line {}: {e}", ln + 2)))
        };
        let k = num(f[0])? as usize;
        let i = num(f[1])? as usize;
        let x = f[3..]
            .iter()
            .map(|s| num(s).map(S::lit))
            .collect::<Result<Vec<_>>>()?;
        rows.push((k, i, x));
    }
    let n = rows.iter().map(|r| r.0).max().map_or(0, |m| m + 1);
    let steps = rows.iter().map(|r| r.1).max().unwrap_or(0);
    if n == 0 || rows.len() != n * (steps + 1) {
        return Err(HotaError::Format("incomplete trajectory grid".into()));
    }
    let mut states = vec![S::zero(); (steps + 1) * n * dim];
    for (k, i, x) in rows {
        states[(i * n + k) * dim..(i * n + k + 1) * dim].copy_from_slice(&x);
    }
    Ok(TrajectoryBatch {
        n,
        dim,
        steps,
        states,
        drifts: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::valuenet::{NetArch, ParamVector};

    fn linear_net(c: [f64; 2]) -> ValueNet<f64> {
        // single linear layer: s = c·x
        let arch = NetArch::new(2, 1, vec![]).unwrap();
        let mut p = ParamVector::zeros(&arch);
        p.0[0] = c[0];
        p.0[1] = c[1];
        ValueNet::new(arch, p).unwrap()
    }

    #[test]
    fn drift_of_zero_and_linear_nets() {
        let zero = ValueNet::<f64>::zeros(NetArch::new(2, 3, vec![8]).unwrap());
        assert_eq!(drift(&zero, 0.3, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let lin = linear_net([1.0, 0.0]);
        assert_eq!(drift(&lin, 0.7, &[3.0, 5.0]).unwrap(), vec![-1.0, 0.0]);
        let net = ValueNet::<f64>::init(NetArch::new(2, 4, vec![16, 16]).unwrap(), 9);
        assert_eq!(
            drift(&net, 0.2, &[0.1, -0.4]).unwrap(),
            drift(&net, 0.2, &[0.1, -0.4]).unwrap()
        );
        assert!(drift(&net, 0.2, &[0.1]).is_err());
    }

    #[test]
    fn deterministic_rollout_without_noise() {
        let zero = ValueNet::<f64>::zeros(NetArch::new(2, 3, vec![8]).unwrap());
        let x0 = [1.0, -2.0, 0.5, 0.25];
        let b = simulate(&zero, &x0, 30, 0.0, 1).unwrap();
        for i in 0..=30 {
            assert_eq!(b.step(i), &x0);
        }
        let lin = linear_net([0.3, -0.6]);
        let b = simulate(&lin, &x0, 12, 0.0, 1).unwrap();
        let end = b.endpoints();
        for k in 0..2 {
            assert!((end[2 * k] - (x0[2 * k] - 0.3)).abs() < 1e-12);
            assert!((end[2 * k + 1] - (x0[2 * k + 1] + 0.6)).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_value_decays_geometrically() {
        let field = GradientField {
            dim: 2,
            grad: |_t: f64, x: &[f64], g: &mut [f64]| g.copy_from_slice(x),
        };
        let x0 = [2.0, -1.0];
        let b = simulate(&field, &x0, 30, 0.0, 0).unwrap();
        let f = (1.0 - 1.0 / 30.0f64).powi(30);
        assert!((b.endpoints()[0] - 2.0 * f).abs() < 1e-12);
        assert!((b.endpoints()[1] + f).abs() < 1e-12);
    }

    #[test]
    fn noise_variance_scales_with_sqrt_dt() {
        let n = 100_000;
        let sigma = 0.7;
        let x0 = vec![0.0f64; 2 * n];
        let b = simulate(&ZeroPolicy(2), &x0, 30, sigma, 42).unwrap();
        let end = b.endpoints();
        for j in 0..2 {
            let m = end.iter().skip(j).step_by(2).sum::<f64>() / n as f64;
            let v = end.iter().skip(j).step_by(2).map(|x| (x - m).powi(2)).sum::<f64>()
                / (n - 1) as f64;
            assert!((v / (sigma * sigma) - 1.0).abs() < 0.05, "var {v}");
        }
    }

    #[test]
    fn rollouts_are_seed_deterministic() {
        let net = ValueNet::<f64>::init(NetArch::new(2, 4, vec![16]).unwrap(), 3);
        let x0: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let a = simulate(&net, &x0, 10, 0.2, 8).unwrap();
        let b = simulate(&net, &x0, 10, 0.2, 8).unwrap();
        let c = simulate(&net, &x0, 10, 0.2, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states, c.states);
        let tr = a.trajectory(3);
        assert_eq!(tr.times.len(), 11);
        assert_eq!(tr.times[0], 0.0);
        assert_eq!(tr.times[10], 1.0);
        assert_eq!(tr.state(10), &a.endpoints()[6..8]);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let field = GradientField {
            dim: 1,
            grad: |t: f64, _x: &[f64], g: &mut [f64]| g[0] = if t > 0.25 { f64::NAN } else { 0.0 },
        };
        match simulate(&field, &[0.0], 8, 0.0, 0) {
            Err(HotaError::NonFiniteState { step }) => assert_eq!(step, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x0 = [0.0, 0.0];
        let y = [2.0, 4.0];
        assert_eq!(interpolate_at(&x0, &y, &[0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(interpolate_at(&x0, &y, &[1.0]).unwrap(), vec![2.0, 4.0]);
        assert_eq!(interpolate_at(&x0, &y, &[0.5]).unwrap(), vec![1.0, 2.0]);
        let (t1, p1) = interpolate_warmup::<f64>(&[0.0, 0.0, 1.0, 1.0], &[2.0, 4.0, 3.0, 3.0], 2, 5).unwrap();
        let (t2, p2) = interpolate_warmup(&[0.0, 0.0, 1.0, 1.0], &[2.0, 4.0, 3.0, 3.0], 2, 5).unwrap();
        assert_eq!((&t1, &p1), (&t2, &p2));
        assert!(t1.iter().all(|t| (0.0..1.0).contains(t)));
        assert!((p1[0] - 2.0 * t1[0]).abs() < 1e-15);
    }

    #[test]
    fn buffer_fifo_and_sampling() {
        let mut buf = ReplayBuffer::<f64>::new(50_000, 2);
        assert!(matches!(buf.sample(1, 0), Err(HotaError::Empty(_))));
        let b = simulate(&ZeroPolicy(2), &[0.0, 0.0, 1.0, 1.0], 30, 0.1, 0).unwrap();
        buf.push(&b.trajectory(0)).unwrap();
        assert_eq!(buf.len(), 31);

        let mut small = ReplayBuffer::<f64>::new(10, 1);
        for i in 0..31 {
            small.push_point(i as f64 / 30.0, &[i as f64]).unwrap();
        }
        assert_eq!(small.len(), 10);
        let (_, xs) = small.sample(500, 1).unwrap();
        assert!(xs.iter().all(|&x| x >= 21.0));
        assert!((21..31).all(|v| xs.contains(&(v as f64))));
        assert_eq!(small.sample(20, 4).unwrap(), small.sample(20, 4).unwrap());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let net = ValueNet::<f64>::init(NetArch::new(2, 2, vec![4]).unwrap(), 1);
        let b = simulate(&net, &[0.1, 0.2, -0.3, 0.4, 0.0, 1.0], 5, 0.3, 2).unwrap();
        let mut text = Vec::new();
        write_trajectory_csv(&b, &mut text).unwrap();
        let text = String::from_utf8(text).unwrap();
        assert!(text.starts_with("traj_id,step,t,x_1,x_2\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 6);
        let back: TrajectoryBatch<f64> = read_trajectory_csv(&text).unwrap();
        assert_eq!(back.states, b.states);
    }
}
