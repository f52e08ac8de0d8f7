//! The HOTA training loop: warmup interpolation, rollouts, replay buffer,
//! balanced gradients of the two losses, Adam with cosine annealing and an
//! EMA target network.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dynamics::{interpolate_warmup, simulate, ReplayBuffer, TrajectoryBatch};
use crate::error::{HotaError, Result};
use crate::losses::{hjb_loss_and_grad, pot_loss_and_grad, AccelMode, HjbBatch, HjbSettings};
use crate::potentials::Scenario;
use crate::scalar::Real;
use crate::valuenet::{LapMode, NetArch, ParamVector, ValueNet, DEFAULT_HUTCHINSON_PROBES};

/// A transport problem the trainer can solve.
pub trait TransportProblem<S: Real> {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn sigma(&self) -> f64;
    fn lambda_hjb(&self) -> f64;
    fn lambda_a(&self) -> f64;
    /// Potential weight `w`; 0 when there is no obstacle.
    fn weight(&self) -> f64 {
        0.0
    }
    fn sample_alpha(&self, n: usize, seed: u64) -> Result<Vec<S>>;
    fn sample_beta(&self, n: usize, seed: u64) -> Result<Vec<S>>;
    /// State cost at each row of `points`.
    fn potential(&self, points: &[S]) -> Result<Vec<S>>;
    /// Trajectories of the controlled dynamics started at `x0`.
    fn rollout(&self, net: &ValueNet<S>, x0: &[S], steps: usize, seed: u64)
        -> Result<TrajectoryBatch<S>>;
}

impl<S: Real> TransportProblem<S> for Scenario {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn sigma(&self) -> f64 {
        self.sigma
    }
    fn lambda_hjb(&self) -> f64 {
        self.lambda_hjb
    }
    fn lambda_a(&self) -> f64 {
        self.lambda_a
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn sample_alpha(&self, n: usize, seed: u64) -> Result<Vec<S>> {
        Scenario::sample_alpha(self, n, seed)
    }
    fn sample_beta(&self, n: usize, seed: u64) -> Result<Vec<S>> {
        Scenario::sample_beta(self, n, seed)
    }
    fn potential(&self, points: &[S]) -> Result<Vec<S>> {
        self.eval_potential_batch(points)
    }
    fn rollout(
        &self,
        net: &ValueNet<S>,
        x0: &[S],
        steps: usize,
        seed: u64,
    ) -> Result<TrajectoryBatch<S>> {
        simulate(net, x0, steps, S::lit(self.sigma), seed)
    }
}

/// Time derivative used by the acceleration penalty during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccelSetting {
    Material,
    TrajFd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total iterations `N`.
    pub iterations: usize,
    /// Interpolation (warmup) iterations `N0`.
    pub warmup: usize,
    /// Control steps `T`.
    pub steps: usize,
    /// Batch size `n`.
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub frequencies: usize,
    pub lr0: f64,
    /// Cosine floor as a fraction of `lr0`.
    pub lr_floor_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Gradient-scale EMA weight and target-network EMA coefficient.
    pub tau: f64,
    pub buffer_capacity: usize,
    pub use_buffer: bool,
    pub grad_balance: bool,
    /// Probes for the randomized Laplacian (used when `d > 8`).
    pub hutchinson_probes: usize,
    pub accel: AccelSetting,
    /// A loss above this aborts the run.
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 70_000,
            warmup: 2_000,
            steps: 30,
            batch: 1024,
            hidden: vec![512, 512, 512],
            frequencies: 20,
            lr0: 5e-4,
            lr_floor_frac: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            tau: 0.9,
            buffer_capacity: crate::dynamics::DEFAULT_BUFFER_CAPACITY,
            use_buffer: true,
            grad_balance: true,
            hutchinson_probes: DEFAULT_HUTCHINSON_PROBES,
            accel: AccelSetting::Material,
            divergence_threshold: 1e8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HotaError::InvalidArgument(m));
        if self.iterations == 0 || self.steps == 0 || self.batch == 0 {
            return bad("iterations, steps and batch must be positive".into());
        }
        if self.use_buffer && self.warmup == 0 {
            return bad("warmup must cover at least one iteration before the buffer is sampled".into());
        }
        let rates = [self.lr0, self.lr_floor_frac, self.adam_eps, self.divergence_threshold];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("learning rate, floor, eps and divergence threshold must be positive".into());
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("tau", self.tau)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1)"));
            }
        }
        if self.hutchinson_probes == 0 {
            return bad("hutchinson_probes must be positive".into());
        }
        if self.use_buffer && self.buffer_capacity == 0 {
            return bad("buffer_capacity must be positive".into());
        }
        NetArch::new(1, self.frequencies, self.hidden.clone())?;
        Ok(())
    }

    pub fn arch(&self, dim: usize) -> Result<NetArch> {
        NetArch::new(dim, self.frequencies, self.hidden.clone())
    }

    /// Learning rate at iteration `i` of `N`.
    pub fn lr(&self, i: usize) -> f64 {
        cosine_lr(self.lr0, self.lr0 * self.lr_floor_frac, i, self.iterations)
    }
}

/// `floor + (lr0 − floor)(1 + cos(π i / N)) / 2`.
pub fn cosine_lr(lr0: f64, floor: f64, i: usize, n: usize) -> f64 {
    let c = (std::f64::consts::PI * i as f64 / n as f64).cos();
    floor + (lr0 - floor) * (1.0 + c) / 2.0
}

fn l2<S: Real>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |a, &b| a + b * b).sqrt()
}

/// `α' = τ ‖g_pot‖/‖g_hjb‖ + (1 − τ) α` and `g = g_pot + λ_hjb α' g_hjb`.
///
/// With a vanishing HJB gradient `α` is kept and `g = g_pot`.
pub fn balance_gradients<S: Real>(
    g_pot: &[S],
    g_hjb: &[S],
    alpha: S,
    tau: S,
    lambda_hjb: S,
) -> Result<(Vec<S>, S)> {
    if g_pot.len() != g_hjb.len() {
        return Err(HotaError::DimensionMismatch {
            expected: g_pot.len(),
            got: g_hjb.len(),
        });
    }
    let (np, nh) = (l2(g_pot), l2(g_hjb));
    if !np.is_finite() || !nh.is_finite() {
        return Err(HotaError::InvalidArgument("non-finite gradient norm".into()));
    }
    if nh == S::zero() {
        return Ok((g_pot.to_vec(), alpha));
    }
    let alpha_new = tau * (np / nh) + (S::one() - tau) * alpha;
    let scale = lambda_hjb * alpha_new;
    let g = g_pot
        .iter()
        .zip(g_hjb)
        .map(|(&p, &h)| p + scale * h)
        .collect();
    Ok((g, alpha_new))
}

/// `θ̄ ← τ θ̄ + (1 − τ) θ`.
pub fn ema_update_target<S: Real>(target: &mut [S], online: &[S], tau: S) -> Result<()> {
    if target.len() != online.len() {
        return Err(HotaError::DimensionMismatch {
            expected: target.len(),
            got: online.len(),
        });
    }
    let keep = S::one() - tau;
    target
        .iter_mut()
        .zip(online)
        .for_each(|(t, &o)| *t = tau * *t + keep * o);
    Ok(())
}

/// Adam moments with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<S: Real> Adam<S> {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [S], grad: &[S], lr: S, b1: S, b2: S, eps: S) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        for (((p, &g), m), v) in theta
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Everything the loop mutates.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub online: ValueNet<S>,
    pub target: ValueNet<S>,
    pub adam: Adam<S>,
    pub alpha: S,
    pub buffer: ReplayBuffer<S>,
    pub step: usize,
}

impl<S: Real> TrainState<S> {
    pub fn new(arch: NetArch, cfg: &TrainConfig) -> Self {
        let online = ValueNet::init(arch.clone(), sub_seed(cfg.seed, 0, Stream::Init));
        let n = online.params.len();
        TrainState {
            target: online.clone(),
            online,
            adam: Adam::new(n),
            alpha: S::one(),
            buffer: ReplayBuffer::new(cfg.buffer_capacity, arch.dim),
            step: 0,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// `"interp"` during warmup, `"buffer"` afterwards.
    pub source: String,
    pub pot_loss: f64,
    pub hjb_loss: f64,
    pub g_pot_norm: f64,
    pub g_hjb_norm: f64,
    pub alpha: f64,
    pub lr: f64,
    pub mean_accel: f64,
    pub buffer_len: usize,
}

#[derive(Clone, Copy)]
enum Stream {
    Init = 1,
    Alpha = 2,
    Beta = 3,
    Collocation = 4,
    Rollout = 5,
    Probes = 6,
}

/// Independent, reproducible seed per (run, iteration, purpose).
fn sub_seed(seed: u64, iter: usize, stream: Stream) -> u64 {
    // splitmix64 finalizer over a packed key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((iter as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add((stream as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains from a fresh state.
pub fn train<S: Real, P: TransportProblem<S> + ?Sized>(
    problem: &P,
    cfg: &TrainConfig,
    on_row: impl FnMut(&MetricsRow),
) -> Result<(TrainState<S>, Vec<MetricsRow>)> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg.arch(problem.dim())?, cfg);
    let log = train_from(problem, cfg, &mut state, on_row)?;
    Ok((state, log))
}

/// Continues training `state` until `cfg.iterations`.
pub fn train_from<S: Real, P: TransportProblem<S> + ?Sized>(
    problem: &P,
    cfg: &TrainConfig,
    state: &mut TrainState<S>,
    on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    train_steps(problem, cfg, state, usize::MAX, on_row)
}

/// Runs at most `limit` further training iterations.
pub fn train_steps<S: Real, P: TransportProblem<S> + ?Sized>(
    problem: &P,
    cfg: &TrainConfig,
    state: &mut TrainState<S>,
    limit: usize,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let d = problem.dim();
    if state.online.arch.dim != d {
        return Err(HotaError::DimensionMismatch {
            expected: d,
            got: state.online.arch.dim,
        });
    }
    let n = cfg.batch;
    let tau = S::lit(cfg.tau);
    let lambda_hjb = S::lit(problem.lambda_hjb());
    let (b1, b2, eps) = (S::lit(cfg.beta1), S::lit(cfg.beta2), S::lit(cfg.adam_eps));
    let mut hjb = HjbSettings::new(S::lit(problem.sigma()), S::lit(problem.lambda_a()), d);
    hjb.accel = match cfg.accel {
        AccelSetting::Material => AccelMode::Material,
        AccelSetting::TrajFd => AccelMode::TrajFd {
            h: S::one() / S::of_usize(cfg.steps),
        },
    };
    let mut log = Vec::new();
    let mut last: Option<MetricsRow> = None;
    let stop = cfg.iterations.min(state.step.saturating_add(limit));
    while state.step < stop {
        let i = state.step;
        let x0 = problem.sample_alpha(n, sub_seed(cfg.seed, i, Stream::Alpha))?;
        let y = problem.sample_beta(n, sub_seed(cfg.seed, i, Stream::Beta))?;
        let interp = i < cfg.warmup || !cfg.use_buffer;
        let (times, points) = if interp {
            interpolate_warmup(&x0, &y, d, sub_seed(cfg.seed, i, Stream::Collocation))?
        } else {
            state
                .buffer
                .sample(n, sub_seed(cfg.seed, i, Stream::Collocation))?
        };
        let traj = problem.rollout(&state.online, &x0, cfg.steps, sub_seed(cfg.seed, i, Stream::Rollout));
        let traj = traj.map_err(|e| diverged(i, format!("rollout: {e}"), &last))?;
        if cfg.use_buffer {
            state.buffer.push(&traj.trajectory(0))?;
        }

        if let LapMode::Hutchinson { .. } = hjb.lap {
            hjb.lap = LapMode::Hutchinson {
                probes: cfg.hutchinson_probes,
                seed: sub_seed(cfg.seed, i, Stream::Probes),
            };
        }
        let potential = problem.potential(&points)?;
        let batch = HjbBatch {
            times: &times,
            points: &points,
            potential: &potential,
        };
        let h = hjb_loss_and_grad(&state.online, &state.target, &batch, &hjb)
            .map_err(|e| diverged(i, format!("hjb loss: {e}"), &last))?;
        let (pot, g_pot) = pot_loss_and_grad(&state.online, traj.endpoints(), &y)?;
        // the potential functional is maximized: descend on −L_pot
        let g_pot: Vec<S> = g_pot.0.iter().map(|g| -*g).collect();

        let (pot_f, hjb_f) = (pot.f64(), h.loss.f64());
        for (what, v) in [("potential loss", pot_f), ("hjb loss", hjb_f)] {
            if !v.is_finite() || v.abs() > cfg.divergence_threshold {
                return Err(diverged(i, format!("{what} = {v}"), &last));
            }
        }
        let (g, alpha) = if cfg.grad_balance {
            balance_gradients(&g_pot, &h.grad.0, state.alpha, tau, lambda_hjb)
                .map_err(|e| diverged(i, e.to_string(), &last))?
        } else {
            let g = g_pot
                .iter()
                .zip(&h.grad.0)
                .map(|(&p, &q)| p + lambda_hjb * q)
                .collect();
            (g, S::one())
        };
        state.alpha = alpha;
        let lr = cfg.lr(i);
        state
            .adam
            .step(&mut state.online.params.0, &g, S::lit(lr), b1, b2, eps);
        if !state.online.params.all_finite() {
            return Err(diverged(i, "non-finite parameters".into(), &last));
        }
        ema_update_target(&mut state.target.params.0, &state.online.params.0, tau)?;
        state.step += 1;

        let row = MetricsRow {
            step: i,
            source: if interp { "interp" } else { "buffer" }.into(),
            pot_loss: pot_f,
            hjb_loss: hjb_f,
            g_pot_norm: l2(&g_pot).f64(),
            g_hjb_norm: h.grad.norm().f64(),
            alpha: alpha.f64(),
            lr,
            mean_accel: h.mean_accel.f64(),
            buffer_len: state.buffer.len(),
        };
        on_row(&row);
        last = Some(row.clone());
        log.push(row);
    }
    Ok(log)
}

fn diverged(step: usize, reason: String, last: &Option<MetricsRow>) -> HotaError {
    HotaError::Diverged {
        step,
        reason,
        last_metrics: last
            .as_ref()
            .map(|r| serde_json::to_string(r).expect("metrics serialize")),
    }
}

const MAGIC: &[u8; 8] = b"HOTACKPT";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Parameters and optimizer state restored from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub arch: NetArch,
    pub online: ParamVector<S>,
    pub target: ParamVector<S>,
    pub adam: Adam<S>,
    pub alpha: S,
    pub step: usize,
}

impl<S: Real> Checkpoint<S> {
    pub fn from_state(state: &TrainState<S>) -> Self {
        Checkpoint {
            arch: state.online.arch.clone(),
            online: state.online.params.clone(),
            target: state.target.params.clone(),
            adam: state.adam.clone(),
            alpha: state.alpha,
            step: state.step,
        }
    }

    /// Little-endian layout:
    /// magic, version u32, scalar width u8, dim u32, frequencies u32,
    /// depth u32, widths u32…, step u64, adam_t u64, alpha, n u64,
    /// online[n], target[n], m[n], v[n], fnv1a-64 of everything before.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.online.len();
        let mut b = Vec::with_capacity(64 + 4 * n * S::BYTES);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(S::BYTES as u8);
        b.extend_from_slice(&(self.arch.dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.arch.frequencies as u32).to_le_bytes());
        b.extend_from_slice(&(self.arch.hidden.len() as u32).to_le_bytes());
        for &w in &self.arch.hidden {
            b.extend_from_slice(&(w as u32).to_le_bytes());
        }
        b.extend_from_slice(&(self.step as u64).to_le_bytes());
        b.extend_from_slice(&self.adam.t.to_le_bytes());
        self.alpha.write_le(&mut b);
        b.extend_from_slice(&(n as u64).to_le_bytes());
        for v in [&self.online.0, &self.target.0, &self.adam.m, &self.adam.v] {
            for &x in v.iter() {
                x.write_le(&mut b);
            }
        }
        let h = fnv1a(&b);
        b.extend_from_slice(&h.to_le_bytes());
        b
    }

    /// Reads either precision and converts to `S`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| HotaError::Format(format!("checkpoint: {m}"));
        if bytes.len() < 8 + 4 + 1 + 8 {
            return Err(fail("truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(fail("checksum mismatch"));
        }
        let mut r = Reader { b: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        let dim = r.u32()? as usize;
        let frequencies = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let hidden = (0..depth)
            .map(|_| r.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = NetArch::new(dim, frequencies, hidden)?;
        let step = r.u64()? as usize;
        let adam_t = r.u64()?;
        let alpha = r.scalar::<S>(width)?;
        let n = r.u64()? as usize;
        if n != arch.num_params() {
            return Err(fail("parameter count does not match architecture"));
        }
        let mut vecs = Vec::with_capacity(4);
        for _ in 0..4 {
            vecs.push((0..n).map(|_| r.scalar::<S>(width)).collect::<Result<Vec<S>>>()?);
        }
        if r.pos != body.len() {
            return Err(fail("trailing bytes"));
        }
        let v = vecs.pop().expect("four vectors");
        let m = vecs.pop().expect("four vectors");
        let target = vecs.pop().expect("four vectors");
        let online = vecs.pop().expect("four vectors");
        Ok(Checkpoint {
            arch,
            online: ParamVector(online),
            target: ParamVector(target),
            adam: Adam { m, v, t: adam_t },
            alpha,
            step,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut b = Vec::new();
        r.read_to_end(&mut b)?;
        Self::from_bytes(&b)
    }

    /// Restores a training state; the replay buffer starts empty.
    pub fn into_state(self, cfg: &TrainConfig) -> Result<TrainState<S>> {
        let dim = self.arch.dim;
        Ok(TrainState {
            online: ValueNet::new(self.arch.clone(), self.online)?,
            target: ValueNet::new(self.arch, self.target)?,
            adam: self.adam,
            alpha: self.alpha,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, dim),
            step: self.step,
        })
    }

    /// The online network, checked against an expected architecture.
    pub fn online_net(&self, expected: Option<&NetArch>) -> Result<ValueNet<S>> {
        if let Some(e) = expected {
            if *e != self.arch {
                return Err(HotaError::ArchMismatch {
                    expected: e.describe(),
                    got: self.arch.describe(),
                });
            }
        }
        ValueNet::new(self.arch.clone(), self.online.clone())
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(HotaError::Format("checkpoint: truncated".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn scalar<S: Real>(&mut self, width: usize) -> Result<S> {
        match width {
            4 => Ok(S::lit(f32::read_le(self.take(4)?) as f64)),
            8 => Ok(S::lit(f64::read_le(self.take(8)?))),
            w => Err(HotaError::Format(format!("checkpoint: scalar width {w}"))),
        }
    }
}

#[cfg(test)]
mod tests;
