//! The value network `s(t, x)` and its derivatives.
//!
//! The network is a tanh MLP over `[x, emb(t)]`, where `emb(t)` holds
//! frequency-normalized Fourier features `(sin(f t)/f, cos(f t)/f)` for
//! `f = 1..=F`. Normalizing by `f` keeps every `d emb / dt` entry in
//! `[-1, 1]`, which matters because `∂t s` appears inside the training loss.
//!
//! Derivatives come from the batched jet engine in [`jet`]; losses built
//! from them are differentiated through [`tape`] and [`grad_wrt_params`].

pub mod jet;
pub mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HotaError, Result};
use crate::scalar::Real;
pub use jet::{JetForward, JetPlan, JetQuery};
pub use tape::{AdScalar, Adjoints, Tape, Var};

/// Largest dimension for which the Laplacian is computed exactly by default.
pub const EXACT_LAPLACIAN_MAX_DIM: usize = 8;
/// Probe count of the default Hutchinson estimator.
pub const DEFAULT_HUTCHINSON_PROBES: usize = 8;

/// Normalized Fourier features of a time in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFeatures<S>(pub Vec<S>);

pub(crate) fn time_embed_into<S: Real>(t: S, frequencies: usize, out: &mut [S]) {
    for k in 0..frequencies {
        let f = S::of_usize(k + 1);
        let (s, c) = (f * t).sin_cos();
        out[2 * k] = s / f;
        out[2 * k + 1] = c / f;
    }
}

/// The embedding formula without the `[0, 1]` domain check.
pub fn fourier_features<S: Real>(t: S, frequencies: usize) -> TimeFeatures<S> {
    let mut v = vec![S::zero(); 2 * frequencies];
    time_embed_into(t, frequencies, &mut v);
    TimeFeatures(v)
}

pub fn time_embed<S: Real>(t: S, frequencies: usize) -> Result<TimeFeatures<S>> {
    if !(t >= S::zero() && t <= S::one()) {
        return Err(HotaError::TimeOutOfRange(t.f64()));
    }
    if frequencies == 0 {
        return Err(HotaError::InvalidArgument("at least one frequency".into()));
    }
    Ok(fourier_features(t, frequencies))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetArch {
    pub dim: usize,
    pub frequencies: usize,
    pub hidden: Vec<usize>,
}

impl NetArch {
    pub fn new(dim: usize, frequencies: usize, hidden: Vec<usize>) -> Result<Self> {
        if dim == 0 || frequencies == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(HotaError::InvalidArgument(format!(
                "bad architecture dim={dim} F={frequencies} hidden={hidden:?}"
            )));
        }
        Ok(NetArch {
            dim,
            frequencies,
            hidden,
        })
    }

    /// `[512, 512, 512]` with 20 frequencies.
    pub fn full_scale(dim: usize) -> Self {
        NetArch {
            dim,
            frequencies: 20,
            hidden: vec![512, 512, 512],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 2 * self.frequencies
    }

    pub fn num_params(&self) -> usize {
        jet::layer_offsets(self)
            .last()
            .map(|&(o, _, _, b)| b + o)
            .unwrap_or(0)
    }

    pub fn describe(&self) -> String {
        format!(
            "mlp(d={}, F={}, hidden={:?})",
            self.dim, self.frequencies, self.hidden
        )
    }
}

/// Flat parameters, layer-major: for each layer `W` (row-major, out x in)
/// followed by `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<S>(pub Vec<S>);

impl<S: Real> ParamVector<S> {
    pub fn zeros(arch: &NetArch) -> Self {
        ParamVector(vec![S::zero(); arch.num_params()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> S {
        self.0.iter().fold(S::zero(), |a, &x| a + x * x).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Real>(&self) -> ParamVector<T> {
        ParamVector(self.0.iter().map(|x| T::lit(x.f64())).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LapMode {
    Exact,
    Hutchinson { probes: usize, seed: u64 },
}

impl LapMode {
    pub fn default_for(dim: usize) -> Self {
        if dim <= EXACT_LAPLACIAN_MAX_DIM {
            LapMode::Exact
        } else {
            LapMode::Hutchinson {
                probes: DEFAULT_HUTCHINSON_PROBES,
                seed: 0,
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LapMode::Hutchinson { probes: 0, .. } => Err(HotaError::InvalidArgument(
                "hutchinson needs at least one probe".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// `s`, `∂t s`, `∇x s` and `tr ∇²x s` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueEval<T> {
    pub value: T,
    pub dt: T,
    pub grad_x: Vec<T>,
    pub lap: T,
}

/// Extra second-order quantities needed by the angular acceleration.
#[derive(Clone, Debug, PartialEq)]
pub enum FlowTerms<T> {
    None,
    /// `∂t ∇x s` and the full Hessian (row-major).
    Full { dt_grad: Vec<T>, hessian: Vec<T> },
    /// `(∂t + w·∇x) ∇x s` for a fixed direction `w` supplied with the query.
    Along { material: Vec<T> },
}

/// Which derivatives a jet query asks for and where they land.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivSpec {
    pub dim: usize,
    pub lap: LapMode,
    pub flow: FlowRequest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowRequest {
    None,
    Full,
    Along,
}

impl DerivSpec {
    pub fn new(dim: usize, lap: LapMode) -> Self {
        DerivSpec {
            dim,
            lap,
            flow: FlowRequest::None,
        }
    }

    fn probes(&self) -> usize {
        match self.lap {
            LapMode::Exact => 0,
            LapMode::Hutchinson { probes, .. } => probes,
        }
    }

    /// Direction layout: `e_t`, `e_1..e_d`, probes, optional flow direction.
    pub fn plan(&self) -> JetPlan {
        let d = self.dim;
        let k = self.probes();
        let mut n_dirs = 1 + d + k;
        let mut pairs = Vec::new();
        match self.lap {
            LapMode::Exact => pairs.extend((1..=d).map(|i| (i, i))),
            LapMode::Hutchinson { .. } => pairs.extend((0..k).map(|j| (1 + d + j, 1 + d + j))),
        }
        match self.flow {
            FlowRequest::None => {}
            FlowRequest::Full => {
                pairs.extend((1..=d).map(|i| (0, i)));
                // with an exact Laplacian the diagonal is already present
                let skip_diag = usize::from(self.lap == LapMode::Exact);
                for i in 1..=d {
                    for j in i + skip_diag..=d {
                        pairs.push((i, j));
                    }
                }
            }
            FlowRequest::Along => {
                let w = n_dirs;
                n_dirs += 1;
                pairs.extend((1..=d).map(|i| (i, w)));
            }
        }
        JetPlan { n_dirs, pairs }
    }

    /// Builds a query; `flow_dirs` supplies the `x`-part of the flow
    /// direction per point when `flow == Along`.
    pub fn query<S: Real>(
        &self,
        times: &[S],
        points: &[S],
        flow_dirs: Option<&[S]>,
    ) -> Result<JetQuery<S>> {
        self.lap.validate()?;
        let d = self.dim;
        let n = times.len();
        if points.len() != n * d {
            return Err(HotaError::DimensionMismatch {
                expected: n * d,
                got: points.len(),
            });
        }
        for &t in times {
            if !(t >= S::zero() && t <= S::one()) {
                return Err(HotaError::TimeOutOfRange(t.f64()));
            }
        }
        let plan = self.plan();
        let nd = plan.n_dirs;
        let stride = 1 + d;
        let mut dirs = vec![S::zero(); n * nd * stride];
        let mut rng = match self.lap {
            LapMode::Hutchinson { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            LapMode::Exact => None,
        };
        let k = self.probes();
        for p in 0..n {
            let base = p * nd * stride;
            dirs[base] = S::one();
            for i in 0..d {
                dirs[base + (1 + i) * stride + 1 + i] = S::one();
            }
            if let Some(rng) = rng.as_mut() {
                for j in 0..k {
                    let o = base + (1 + d + j) * stride;
                    for i in 0..d {
                        dirs[o + 1 + i] = rademacher(rng);
                    }
                }
            }
            if self.flow == FlowRequest::Along {
                let w = flow_dirs.ok_or_else(|| {
                    HotaError::InvalidArgument("flow direction required".into())
                })?;
                if w.len() != n * d {
                    return Err(HotaError::DimensionMismatch {
                        expected: n * d,
                        got: w.len(),
                    });
                }
                let o = base + (1 + d + k) * stride;
                dirs[o] = S::one();
                dirs[o + 1..o + 1 + d].copy_from_slice(&w[p * d..(p + 1) * d]);
            }
        }
        Ok(JetQuery {
            plan,
            times: times.to_vec(),
            points: points.to_vec(),
            dirs,
        })
    }

    /// Reads one point's channel outputs (in any arithmetic) into a
    /// [`ValueEval`] plus the requested flow terms.
    pub fn unpack<T: Copy>(&self, ch: &[T], add: impl Fn(T, T) -> T, scale: impl Fn(T, f64) -> T) -> (ValueEval<T>, FlowTerms<T>) {
        let d = self.dim;
        let k = self.probes();
        let plan_dirs = 1 + d + k + usize::from(self.flow == FlowRequest::Along);
        let pair0 = 1 + plan_dirs;
        let value = ch[0];
        let dt = ch[1];
        let grad_x = ch[2..2 + d].to_vec();
        let (lap, after_lap) = match self.lap {
            LapMode::Exact => {
                let mut acc = ch[pair0];
                for i in 1..d {
                    acc = add(acc, ch[pair0 + i]);
                }
                (acc, pair0 + d)
            }
            LapMode::Hutchinson { probes, .. } => {
                let mut acc = ch[pair0];
                for j in 1..probes {
                    acc = add(acc, ch[pair0 + j]);
                }
                (scale(acc, 1.0 / probes as f64), pair0 + probes)
            }
        };
        let flow = match self.flow {
            FlowRequest::None => FlowTerms::None,
            FlowRequest::Full => {
                let dt_grad = ch[after_lap..after_lap + d].to_vec();
                let mut tri = after_lap + d;
                let exact = self.lap == LapMode::Exact;
                let mut hessian = vec![ch[0]; d * d];
                for i in 0..d {
                    if exact {
                        hessian[i * d + i] = ch[pair0 + i];
                    }
                    for j in i + usize::from(exact)..d {
                        hessian[i * d + j] = ch[tri];
                        hessian[j * d + i] = ch[tri];
                        tri += 1;
                    }
                }
                FlowTerms::Full { dt_grad, hessian }
            }
            FlowRequest::Along => FlowTerms::Along {
                material: ch[after_lap..after_lap + d].to_vec(),
            },
        };
        (
            ValueEval {
                value,
                dt,
                grad_x,
                lap,
            },
            flow,
        )
    }
}

fn rademacher<S: Real, R: Rng>(rng: &mut R) -> S {
    if rng.random::<bool>() {
        S::one()
    } else {
        -S::one()
    }
}

/// Hutchinson trace estimate `(1/k) Σ z_jᵀ H z_j` with Rademacher probes.
pub fn hutchinson_lap<S: Real, F>(mut hvp: F, dim: usize, probes: usize, seed: u64) -> Result<S>
where
    F: FnMut(&[S]) -> Result<Vec<S>>,
{
    if probes == 0 {
        return Err(HotaError::InvalidArgument(
            "hutchinson needs at least one probe".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![S::zero(); dim];
    let mut acc = S::zero();
    for _ in 0..probes {
        for zi in z.iter_mut() {
            *zi = rademacher(&mut rng);
        }
        let hz = hvp(&z)?;
        if hz.len() != dim {
            return Err(HotaError::DimensionMismatch {
                expected: dim,
                got: hz.len(),
            });
        }
        acc += z.iter().zip(&hz).fold(S::zero(), |a, (&x, &y)| a + x * y);
    }
    Ok(acc / S::of_usize(probes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet<S> {
    pub arch: NetArch,
    pub params: ParamVector<S>,
}

impl<S: Real> ValueNet<S> {
    pub fn new(arch: NetArch, params: ParamVector<S>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(HotaError::DimensionMismatch {
                expected: arch.num_params(),
                got: params.len(),
            });
        }
        if !params.all_finite() {
            return Err(HotaError::InvalidArgument("non-finite parameters".into()));
        }
        Ok(ValueNet { arch, params })
    }

    pub fn zeros(arch: NetArch) -> Self {
        let params = ParamVector::zeros(&arch);
        ValueNet { arch, params }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(arch: NetArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![S::zero(); arch.num_params()];
        for (fan_out, fan_in, w_off, _) in jet::layer_offsets(&arch) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut theta[w_off..w_off + fan_out * fan_in] {
                *w = S::lit(rng.random_range(-bound..bound));
            }
        }
        ValueNet {
            arch,
            params: ParamVector(theta),
        }
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn jets(&self, q: &JetQuery<S>) -> JetForward<S> {
        jet::forward(&self.arch, &self.params.0, q)
    }

    /// Parameter gradient of `Σ cot · outputs`.
    pub fn pullback(&self, fwd: &JetForward<S>, cot: &[S]) -> Vec<S> {
        jet::backward(&self.arch, &self.params.0, fwd, cot, true, false)
            .params
            .expect("params requested")
    }

    fn value_query(&self, times: &[S], points: &[S]) -> Result<JetQuery<S>> {
        DerivSpec::new(self.dim(), LapMode::Exact)
            .query(times, points, None)
            .map(|mut q| {
                q.plan = JetPlan::value_only();
                q.dirs.clear();
                q
            })
    }

    pub fn forward(&self, t: S, x: &[S]) -> Result<S> {
        Ok(self.forward_batch(&[t], x)?[0])
    }

    pub fn forward_batch(&self, times: &[S], points: &[S]) -> Result<Vec<S>> {
        let q = self.value_query(times, points)?;
        Ok(self.jets(&q).outputs())
    }

    /// Values and spatial gradients by one reverse sweep per batch.
    pub fn value_and_grad_batch(&self, times: &[S], points: &[S]) -> Result<(Vec<S>, Vec<S>)> {
        let d = self.dim();
        let q = self.value_query(times, points)?;
        let fwd = self.jets(&q);
        let ones = vec![S::one(); q.len()];
        let back = jet::backward(&self.arch, &self.params.0, &fwd, &ones, false, true);
        let ubar = back.input.expect("input requested");
        let in_dim = self.arch.input_dim();
        let mut grads = Vec::with_capacity(q.len() * d);
        for p in 0..q.len() {
            grads.extend_from_slice(&ubar[p * in_dim..p * in_dim + d]);
        }
        Ok((fwd.outputs(), grads))
    }

    /// Spatial gradients at many points sharing one time.
    pub fn grad_at_time(&self, t: S, points: &[S]) -> Result<Vec<S>> {
        let n = points.len() / self.dim().max(1);
        self.value_and_grad_batch(&vec![t; n], points).map(|(_, g)| g)
    }

    pub fn eval_derivatives(&self, t: S, x: &[S], lap: LapMode) -> Result<ValueEval<S>> {
        Ok(self.eval_batch(&[t], x, lap)?.pop().expect("one point"))
    }

    pub fn eval_batch(&self, times: &[S], points: &[S], lap: LapMode) -> Result<Vec<ValueEval<S>>> {
        let spec = DerivSpec::new(self.dim(), lap);
        self.eval_spec(&spec, times, points, None)
            .map(|v| v.into_iter().map(|(e, _)| e).collect())
    }

    pub fn eval_spec(
        &self,
        spec: &DerivSpec,
        times: &[S],
        points: &[S],
        flow_dirs: Option<&[S]>,
    ) -> Result<Vec<(ValueEval<S>, FlowTerms<S>)>> {
        let q = spec.query(times, points, flow_dirs)?;
        let fwd = self.jets(&q);
        Ok((0..q.len())
            .map(|p| spec.unpack(fwd.point(p), |a, b| a + b, |a, c| a * S::lit(c)))
            .collect())
    }

    pub fn drift(&self, t: S, x: &[S]) -> Result<Vec<S>> {
        let (_, g) = self.value_and_grad_batch(&[t], x)?;
        Ok(g.into_iter().map(|v| -v).collect())
    }
}

/// Value and parameter gradient of a scalar objective assembled on a tape
/// from the outputs of one or more jet queries.
///
/// The closure receives, for each query, the point-major channel outputs as
/// tape leaves, and returns the objective node.
pub fn grad_wrt_params<S, F>(
    net: &ValueNet<S>,
    queries: &[JetQuery<S>],
    objective: F,
) -> Result<(S, ParamVector<S>)>
where
    S: Real,
    F: for<'t> FnOnce(&'t Tape<S>, &[Vec<Var<'t, S>>]) -> Result<Var<'t, S>>,
{
    let fwds: Vec<JetForward<S>> = queries.iter().map(|q| net.jets(q)).collect();
    let tape = Tape::new();
    let leaves: Vec<Vec<Var<'_, S>>> = fwds
        .iter()
        .map(|f| f.outputs().into_iter().map(|v| tape.var(v)).collect())
        .collect();
    let obj = objective(&tape, &leaves)?;
    let adj = tape.gradient(obj)?;
    let mut grad = vec![S::zero(); net.arch.num_params()];
    for (fwd, lv) in fwds.iter().zip(&leaves) {
        let cot: Vec<S> = lv.iter().map(|&v| adj.of(v)).collect();
        if cot.iter().all(|c| *c == S::zero()) {
            continue;
        }
        let g = net.pullback(fwd, &cot);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
    }
    Ok((obj.value(), ParamVector(grad)))
}
