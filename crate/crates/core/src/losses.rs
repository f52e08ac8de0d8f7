//! Potential-matching loss, symmetric HJB residual loss and the angular
//! acceleration penalty.
//!
//! Residual formulas are written once over [`AdScalar`], so the same code
//! produces plain values and tape nodes for parameter gradients.

use crate::error::{HotaError, Result};
use crate::potentials::Scenario;
use crate::scalar::Real;
use crate::valuenet::tape::{AdScalar, Tape, Var};
use crate::valuenet::{
    grad_wrt_params, DerivSpec, FlowRequest, FlowTerms, JetPlan, LapMode, ParamVector, ValueEval,
    ValueNet, EXACT_LAPLACIAN_MAX_DIM,
};

/// Below this gradient norm the unit direction is undefined and `a = 0`.
pub const DIRECTION_EPS: f64 = 1e-8;

/// `(1/n) Σ s(1, x_T) − (1/n) Σ s(1, y)`.
pub fn pot_loss<S: Real>(net: &ValueNet<S>, x_end: &[S], y: &[S]) -> Result<S> {
    let (n, _) = pot_shapes(net, x_end, y)?;
    let ones = vec![S::one(); n];
    let a = net.forward_batch(&ones, x_end)?;
    let b = net.forward_batch(&ones, y)?;
    Ok(mean(&a) - mean(&b))
}

/// [`pot_loss`] together with its parameter gradient; `x_end` is a constant.
pub fn pot_loss_and_grad<S: Real>(
    net: &ValueNet<S>,
    x_end: &[S],
    y: &[S],
) -> Result<(S, ParamVector<S>)> {
    let (n, _) = pot_shapes(net, x_end, y)?;
    let mut points = Vec::with_capacity(2 * x_end.len());
    points.extend_from_slice(x_end);
    points.extend_from_slice(y);
    let times = vec![S::one(); 2 * n];
    let q = value_query(net, &times, &points)?;
    let fwd = net.jets(&q);
    let out = fwd.outputs();
    let loss = mean(&out[..n]) - mean(&out[n..]);
    let w = S::one() / S::of_usize(n);
    let cot: Vec<S> = (0..2 * n).map(|k| if k < n { w } else { -w }).collect();
    Ok((loss, ParamVector(net.pullback(&fwd, &cot))))
}

fn pot_shapes<S: Real>(net: &ValueNet<S>, x_end: &[S], y: &[S]) -> Result<(usize, usize)> {
    let d = net.dim();
    if x_end.is_empty() || y.is_empty() {
        return Err(HotaError::Empty("potential loss batch"));
    }
    if x_end.len() != y.len() || x_end.len() % d != 0 {
        return Err(HotaError::DimensionMismatch {
            expected: x_end.len(),
            got: y.len(),
        });
    }
    Ok((x_end.len() / d, d))
}

fn value_query<S: Real>(
    net: &ValueNet<S>,
    times: &[S],
    points: &[S],
) -> Result<crate::valuenet::jet::JetQuery<S>> {
    let mut q = DerivSpec::new(net.dim(), LapMode::Exact).query(times, points, None)?;
    q.plan = JetPlan::value_only();
    q.dirs.clear();
    Ok(q)
}

fn mean<S: Real>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |a, &b| a + b) / S::of_usize(v.len())
}

/// Symmetric residuals of one collocation point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualPair<T> {
    /// `∂t` of the online net with the spatial terms of the target.
    pub r_online: T,
    /// `∂t` of the target with the spatial terms of the online net.
    pub r_target: T,
}

fn sq_norm<S: Real, T: AdScalar<S>>(v: &[T]) -> T {
    let mut acc = v[0] * v[0];
    for &x in &v[1..] {
        acc = acc + x * x;
    }
    acc
}

/// `‖v‖` with a zero subgradient at the origin.
fn norm<S: Real, T: AdScalar<S>>(v: &[T]) -> T {
    let s = sq_norm(v);
    if s.val() == S::zero() {
        s.lift(S::zero())
    } else {
        s.sqrt_()
    }
}

/// `r = ∂t s_a − ½‖∇s_b‖² + U + σ²/2 Δs_b + λ_a ‖a‖` for both role assignments.
pub fn hjb_residual_pair<S: Real, T: AdScalar<S>>(
    online: &ValueEval<T>,
    target: &ValueEval<T>,
    u: S,
    sigma: S,
    lambda_a: S,
    a_norm: T,
) -> ResidualPair<T> {
    let half = S::lit(0.5);
    let diff = half * sigma * sigma;
    let pen = a_norm * lambda_a;
    let spatial = |e: &ValueEval<T>| sq_norm(&e.grad_x) * (-half) + e.lap * diff + u;
    ResidualPair {
        r_online: online.dt + spatial(target) + pen,
        r_target: target.dt + spatial(online) + pen,
    }
}

/// Angular acceleration from the gradient `g = ∇s` and its material
/// derivative `m = (∂t + v·∇)∇s` along `v = −g`:
/// `a = (I − uuᵀ) m / ‖g‖` with `u = g/‖g‖`.
pub fn angular_from_material<S: Real, T: AdScalar<S>>(g: &[T], m: &[T]) -> Vec<T> {
    let gn = norm(g);
    if gn.val() < S::lit(DIRECTION_EPS) {
        return g.iter().map(|x| x.lift(S::zero())).collect();
    }
    let u: Vec<T> = g.iter().map(|&x| x / gn).collect();
    let mut um = u[0] * m[0];
    for i in 1..u.len() {
        um = um + u[i] * m[i];
    }
    u.iter()
        .zip(m)
        .map(|(&ui, &mi)| (mi - ui * um) / gn)
        .collect()
}

/// Material derivative `∂t g − H g` from full second-order terms.
fn material_from_full<S: Real, T: AdScalar<S>>(g: &[T], dt_grad: &[T], hessian: &[T]) -> Vec<T> {
    let d = g.len();
    (0..d)
        .map(|i| {
            let mut acc = dt_grad[i];
            for j in 0..d {
                acc = acc - hessian[i * d + j] * g[j];
            }
            acc
        })
        .collect()
}

/// Unit direction `g/‖g‖`, or zero below the guard.
fn unit<S: Real, T: AdScalar<S>>(g: &[T]) -> Vec<T> {
    let gn = norm(g);
    if gn.val() < S::lit(DIRECTION_EPS) {
        return g.iter().map(|x| x.lift(S::zero())).collect();
    }
    g.iter().map(|&x| x / gn).collect()
}

/// How the time derivative in the angular acceleration is taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AccelMode<S> {
    /// Material derivative along the flow, by automatic differentiation.
    Material,
    /// Backward difference `(u(t, x) − u(t − h, x − v h)) / h`.
    TrajFd { h: S },
}

/// Which derivative `angular_acceleration` uses at a single point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AccelQuery<'a, S> {
    Autodiff,
    /// Previous unit direction and the time step separating it from now.
    TrajFd { prev_dir: &'a [S], dt: S },
}

/// Angular acceleration of the policy direction at `(t, x)`.
pub fn angular_acceleration<S: Real>(
    net: &ValueNet<S>,
    t: S,
    x: &[S],
    mode: AccelQuery<'_, S>,
) -> Result<Vec<S>> {
    match mode {
        AccelQuery::Autodiff => {
            let mut spec = DerivSpec::new(net.dim(), LapMode::Exact);
            spec.flow = FlowRequest::Full;
            let (e, flow) = net.eval_spec(&spec, &[t], x, None)?.pop().expect("one point");
            let FlowTerms::Full { dt_grad, hessian } = flow else {
                unreachable!("full flow terms requested")
            };
            let m = material_from_full(&e.grad_x, &dt_grad, &hessian);
            Ok(angular_from_material(&e.grad_x, &m))
        }
        AccelQuery::TrajFd { prev_dir, dt } => {
            if prev_dir.len() != net.dim() {
                return Err(HotaError::DimensionMismatch {
                    expected: net.dim(),
                    got: prev_dir.len(),
                });
            }
            let g = net.grad_at_time(t, x)?;
            let u = unit(&g);
            Ok(u.iter().zip(prev_dir).map(|(a, b)| (*a - *b) / dt).collect())
        }
    }
}

/// Settings shared by every HJB loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HjbSettings<S> {
    pub sigma: S,
    pub lambda_a: S,
    pub lap: LapMode,
    pub accel: AccelMode<S>,
}

impl<S: Real> HjbSettings<S> {
    pub fn new(sigma: S, lambda_a: S, dim: usize) -> Self {
        HjbSettings {
            sigma,
            lambda_a,
            lap: LapMode::default_for(dim),
            accel: AccelMode::Material,
        }
    }

    fn wants_accel(&self) -> bool {
        self.lambda_a != S::zero()
    }
}

/// Collocation points with their potential values.
#[derive(Clone, Copy, Debug)]
pub struct HjbBatch<'a, S> {
    pub times: &'a [S],
    pub points: &'a [S],
    pub potential: &'a [S],
}

#[derive(Clone, Debug)]
pub struct HjbOutput<S> {
    pub loss: S,
    pub grad: ParamVector<S>,
    /// Mean `‖a‖` over the batch (0 when the penalty is off).
    pub mean_accel: S,
}

/// Everything needed to assemble the per-point residuals.
struct Prepared<S> {
    n: usize,
    online_spec: DerivSpec,
    queries: Vec<crate::valuenet::jet::JetQuery<S>>,
    /// Spec used for the optional previous-point query.
    prev_spec: Option<DerivSpec>,
    target: Vec<ValueEval<S>>,
}

fn prepare<S: Real>(
    online: &ValueNet<S>,
    target: &ValueNet<S>,
    batch: &HjbBatch<'_, S>,
    cfg: &HjbSettings<S>,
) -> Result<Prepared<S>> {
    if online.arch != target.arch {
        return Err(HotaError::ArchMismatch {
            expected: online.arch.describe(),
            got: target.arch.describe(),
        });
    }
    let d = online.dim();
    let n = batch.times.len();
    if n == 0 {
        return Err(HotaError::Empty("hjb batch"));
    }
    if batch.points.len() != n * d || batch.potential.len() != n {
        return Err(HotaError::DimensionMismatch {
            expected: n * d,
            got: batch.points.len(),
        });
    }
    let mut online_spec = DerivSpec::new(d, cfg.lap);
    let mut flow_dirs = None;
    let mut prev_spec = None;
    let mut prev_query = None;
    if cfg.wants_accel() {
        match cfg.accel {
            AccelMode::Material if d <= EXACT_LAPLACIAN_MAX_DIM => {
                online_spec.flow = FlowRequest::Full;
            }
            AccelMode::Material => {
                online_spec.flow = FlowRequest::Along;
                let (_, g) = online.value_and_grad_batch(batch.times, batch.points)?;
                flow_dirs = Some(g.iter().map(|v| -*v).collect::<Vec<S>>());
            }
            AccelMode::TrajFd { h } => {
                let (_, g) = online.value_and_grad_batch(batch.times, batch.points)?;
                let prev_t: Vec<S> = batch.times.iter().map(|&t| (t - h).max(S::zero())).collect();
                let prev_x: Vec<S> = batch
                    .points
                    .iter()
                    .zip(&g)
                    .map(|(&x, &gi)| x + gi * h)
                    .collect();
                let spec = DerivSpec::new(d, cfg.lap);
                prev_query = Some(spec.query(&prev_t, &prev_x, None)?);
                prev_spec = Some(spec);
            }
        }
    }
    let mut queries = vec![online_spec.query(batch.times, batch.points, flow_dirs.as_deref())?];
    queries.extend(prev_query);
    let target_spec = DerivSpec::new(d, cfg.lap);
    let target = target.eval_spec(&target_spec, batch.times, batch.points, None)?;
    Ok(Prepared {
        n,
        online_spec,
        queries,
        prev_spec,
        target: target.into_iter().map(|(e, _)| e).collect(),
    })
}

/// Residual pair and `‖a‖` at point `p`, in any arithmetic.
fn point_terms<S: Real, T: AdScalar<S>>(
    prep: &Prepared<S>,
    chans: &[&[T]],
    p: usize,
    u: S,
    cfg: &HjbSettings<S>,
) -> (ResidualPair<T>, T) {
    let c = prep.queries[0].plan.channels();
    let ch = &chans[0][p * c..(p + 1) * c];
    let (on, flow) = prep
        .online_spec
        .unpack(ch, |a, b| a + b, |a, k| a * S::lit(k));
    let zero = ch[0].lift(S::zero());
    let a_norm = if !cfg.wants_accel() {
        zero
    } else {
        let a = match (&flow, cfg.accel) {
            (FlowTerms::Full { dt_grad, hessian }, _) => {
                angular_from_material(&on.grad_x, &material_from_full(&on.grad_x, dt_grad, hessian))
            }
            (FlowTerms::Along { material }, _) => angular_from_material(&on.grad_x, material),
            (FlowTerms::None, AccelMode::TrajFd { h }) => {
                let spec = prep.prev_spec.as_ref().expect("previous-point spec");
                let cp = prep.queries[1].plan.channels();
                let prev = &chans[1][p * cp..(p + 1) * cp];
                let (pe, _) = spec.unpack(prev, |a, b| a + b, |a, k| a * S::lit(k));
                let inv = S::one() / h;
                unit(&on.grad_x)
                    .iter()
                    .zip(unit(&pe.grad_x))
                    .map(|(&a, b)| (a - b) * inv)
                    .collect()
            }
            (FlowTerms::None, AccelMode::Material) => unreachable!("flow terms requested"),
        };
        norm(&a)
    };
    let tg = &prep.target[p];
    let tgt = ValueEval {
        value: zero.lift(tg.value),
        dt: zero.lift(tg.dt),
        grad_x: tg.grad_x.iter().map(|&v| zero.lift(v)).collect(),
        lap: zero.lift(tg.lap),
    };
    let pair = hjb_residual_pair(&on, &tgt, u, cfg.sigma, cfg.lambda_a, a_norm);
    (pair, a_norm)
}

fn assemble<S: Real, T: AdScalar<S>>(
    prep: &Prepared<S>,
    chans: &[&[T]],
    potential: &[S],
    cfg: &HjbSettings<S>,
) -> (T, S) {
    let inv_n = S::one() / S::of_usize(prep.n);
    let mut total: Option<T> = None;
    let mut accel = S::zero();
    for (p, &u) in potential.iter().enumerate().take(prep.n) {
        let (r, a) = point_terms(prep, chans, p, u, cfg);
        accel += a.val();
        let term = r.r_online * r.r_online + r.r_target * r.r_target;
        total = Some(match total {
            None => term,
            Some(acc) => acc + term,
        });
    }
    (total.expect("nonempty batch") * inv_n, accel * inv_n)
}

/// `(1/n) Σ r_online² + (1/n) Σ r_target²`.
pub fn hjb_loss<S: Real>(
    online: &ValueNet<S>,
    target: &ValueNet<S>,
    batch: &HjbBatch<'_, S>,
    cfg: &HjbSettings<S>,
) -> Result<S> {
    let prep = prepare(online, target, batch, cfg)?;
    let outs: Vec<Vec<S>> = prep.queries.iter().map(|q| online.jets(q).outputs()).collect();
    let chans: Vec<&[S]> = outs.iter().map(|v| v.as_slice()).collect();
    Ok(assemble(&prep, &chans, batch.potential, cfg).0)
}

/// [`hjb_loss`] with its gradient with respect to the online parameters;
/// the target network is held fixed.
pub fn hjb_loss_and_grad<S: Real>(
    online: &ValueNet<S>,
    target: &ValueNet<S>,
    batch: &HjbBatch<'_, S>,
    cfg: &HjbSettings<S>,
) -> Result<HjbOutput<S>> {
    let prep = prepare(online, target, batch, cfg)?;
    let mut mean_accel = S::zero();
    let (loss, grad) = grad_wrt_params(
        online,
        &prep.queries,
        |_tape: &Tape<S>, leaves: &[Vec<Var<'_, S>>]| {
            let chans: Vec<&[Var<'_, S>]> = leaves.iter().map(|v| v.as_slice()).collect();
            let (loss, a) = assemble(&prep, &chans, batch.potential, cfg);
            mean_accel = a;
            Ok(loss)
        },
    )?;
    Ok(HjbOutput {
        loss,
        grad,
        mean_accel,
    })
}

/// [`hjb_loss`] with `U` taken from a scenario.
pub fn hjb_loss_for<S: Real>(
    online: &ValueNet<S>,
    target: &ValueNet<S>,
    times: &[S],
    points: &[S],
    scn: &Scenario,
    cfg: &HjbSettings<S>,
) -> Result<S> {
    let potential = scn.eval_potential_batch(points)?;
    hjb_loss(
        online,
        target,
        &HjbBatch {
            times,
            points,
            potential: &potential,
        },
        cfg,
    )
}
