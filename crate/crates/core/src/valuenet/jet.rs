//! Batched second-order jets through the tanh MLP.
//!
//! Every query point carries a set of first-order input directions and a
//! set of direction pairs. The forward pass propagates, per point, the value
//! `s`, the directional derivatives `D_a s`, and the mixed second
//! derivatives `D_a D_b s` through each layer. Linear layers act on all
//! channels with a single GEMM; the activation applies the jet chain rule
//!
//! ```text
//! h   = tanh(z)
//! h_a = tanh'(z) z_a
//! h_ab = tanh'(z) z_ab + tanh''(z) z_a z_b
//! ```
//!
//! The backward pass is the exact adjoint of that forward pass, so any loss
//! built from jet outputs can be differentiated with respect to the weights.
//!
//! Rows are laid out point-major: row `p * C + c` holds channel `c` of point
//! `p`, where channel 0 is the value, `1..=C1` the directions and the rest
//! the pairs.

use rayon::prelude::*;

use super::time_embed_into;
use super::NetArch;
use crate::scalar::Real;

/// Points per independently processed block. Fixed so that gradient
/// reductions happen in the same order regardless of thread count.
pub const CHUNK_POINTS: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JetPlan {
    pub n_dirs: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl JetPlan {
    pub fn value_only() -> Self {
        JetPlan {
            n_dirs: 0,
            pairs: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        1 + self.n_dirs + self.pairs.len()
    }
}

/// Inputs of one jet evaluation.
///
/// `dirs` holds, for each point, `n_dirs` directions of length `1 + d`
/// laid out as `(dt, dx_1..dx_d)`.
#[derive(Clone, Debug)]
pub struct JetQuery<S> {
    pub plan: JetPlan,
    pub times: Vec<S>,
    pub points: Vec<S>,
    pub dirs: Vec<S>,
}

impl<S: Real> JetQuery<S> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub(crate) struct ChunkActs<S> {
    pub start: usize,
    pub count: usize,
    /// Inputs to each layer (`acts[0]` is the embedded input).
    pub acts: Vec<Vec<S>>,
    /// Pre-activations of the hidden layers.
    pub pre: Vec<Vec<S>>,
    pub out: Vec<S>,
}

pub struct JetForward<S> {
    pub(crate) plan: JetPlan,
    pub(crate) n_points: usize,
    pub(crate) chunks: Vec<ChunkActs<S>>,
}

impl<S: Real> JetForward<S> {
    pub fn channels(&self) -> usize {
        self.plan.channels()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Channel outputs of point `p`.
    pub fn point(&self, p: usize) -> &[S] {
        let c = self.channels();
        let chunk = &self.chunks[p / CHUNK_POINTS];
        let local = p - chunk.start;
        &chunk.out[local * c..(local + 1) * c]
    }

    /// All outputs, point-major.
    pub fn outputs(&self) -> Vec<S> {
        self.chunks
            .iter()
            .flat_map(|c| c.out.iter().copied())
            .collect()
    }
}

/// Shapes `(out, in)` of each layer together with weight/bias offsets.
pub(crate) fn layer_offsets(arch: &NetArch) -> Vec<(usize, usize, usize, usize)> {
    let mut dims = vec![arch.input_dim()];
    dims.extend(arch.hidden.iter().copied());
    dims.push(1);
    let mut off = 0;
    let mut v = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let w_off = off;
        let b_off = off + fan_in * fan_out;
        off = b_off + fan_out;
        v.push((fan_out, fan_in, w_off, b_off));
    }
    v
}

fn build_input<S: Real>(arch: &NetArch, q: &JetQuery<S>, start: usize, count: usize) -> Vec<S> {
    let d = arch.dim;
    let f = arch.frequencies;
    let in_dim = arch.input_dim();
    let c = q.plan.channels();
    let nd = q.plan.n_dirs;
    let mut u = vec![S::zero(); count * c * in_dim];
    let mut emb = vec![S::zero(); 2 * f];
    let mut demb = vec![S::zero(); 2 * f];
    let mut ddemb = vec![S::zero(); 2 * f];
    for local in 0..count {
        let p = start + local;
        let t = q.times[p];
        time_embed_into(t, f, &mut emb);
        for k in 0..f {
            let fr = S::of_usize(k + 1);
            let (s, co) = (fr * t).sin_cos();
            demb[2 * k] = co;
            demb[2 * k + 1] = -s;
            ddemb[2 * k] = -fr * s;
            ddemb[2 * k + 1] = -fr * co;
        }
        let base = local * c * in_dim;
        let row = &mut u[base..base + in_dim];
        row[..d].copy_from_slice(&q.points[p * d..(p + 1) * d]);
        row[d..].copy_from_slice(&emb);
        let dir = |a: usize| &q.dirs[(p * nd + a) * (1 + d)..(p * nd + a + 1) * (1 + d)];
        for a in 0..nd {
            let da = dir(a);
            let row = &mut u[base + (1 + a) * in_dim..base + (2 + a) * in_dim];
            row[..d].copy_from_slice(&da[1..]);
            for k in 0..2 * f {
                row[d + k] = da[0] * demb[k];
            }
        }
        for (qi, &(a, b)) in q.plan.pairs.iter().enumerate() {
            let tt = dir(a)[0] * dir(b)[0];
            if tt == S::zero() {
                continue;
            }
            let r = 1 + nd + qi;
            let row = &mut u[base + r * in_dim..base + (r + 1) * in_dim];
            for k in 0..2 * f {
                row[d + k] = tt * ddemb[k];
            }
        }
    }
    u
}

fn tanh_jet_forward<S: Real>(plan: &JetPlan, z: &[S], h: &mut [S], count: usize, width: usize) {
    let c = plan.channels();
    let nd = plan.n_dirs;
    let mut d1 = vec![S::zero(); width];
    let mut d2 = vec![S::zero(); width];
    let two = S::lit(2.0);
    for p in 0..count {
        let base = p * c * width;
        for j in 0..width {
            let y = z[base + j].tanh_fast();
            h[base + j] = y;
            d1[j] = S::one() - y * y;
            d2[j] = -two * y * d1[j];
        }
        for a in 0..nd {
            let o = base + (1 + a) * width;
            for j in 0..width {
                h[o + j] = d1[j] * z[o + j];
            }
        }
        for (qi, &(a, b)) in plan.pairs.iter().enumerate() {
            let o = base + (1 + nd + qi) * width;
            let oa = base + (1 + a) * width;
            let ob = base + (1 + b) * width;
            for j in 0..width {
                h[o + j] = d1[j] * z[o + j] + d2[j] * z[oa + j] * z[ob + j];
            }
        }
    }
}

/// Adjoint of [`tanh_jet_forward`]: maps `hbar` onto `zbar`.
fn tanh_jet_backward<S: Real>(
    plan: &JetPlan,
    z: &[S],
    h: &[S],
    hbar: &[S],
    zbar: &mut [S],
    count: usize,
    width: usize,
) {
    let c = plan.channels();
    let nd = plan.n_dirs;
    let mut d1 = vec![S::zero(); width];
    let mut d2 = vec![S::zero(); width];
    let mut d3 = vec![S::zero(); width];
    let two = S::lit(2.0);
    let four = S::lit(4.0);
    for p in 0..count {
        let base = p * c * width;
        for j in 0..width {
            let y = h[base + j];
            let g1 = S::one() - y * y;
            d1[j] = g1;
            d2[j] = -two * y * g1;
            d3[j] = -two * g1 * g1 + four * y * y * g1;
        }
        for j in 0..width {
            zbar[base + j] = hbar[base + j] * d1[j];
        }
        for a in 0..nd {
            let o = base + (1 + a) * width;
            for j in 0..width {
                zbar[base + j] += hbar[o + j] * z[o + j] * d2[j];
                zbar[o + j] = hbar[o + j] * d1[j];
            }
        }
        for (qi, &(a, b)) in plan.pairs.iter().enumerate() {
            let o = base + (1 + nd + qi) * width;
            let oa = base + (1 + a) * width;
            let ob = base + (1 + b) * width;
            for j in 0..width {
                let hb = hbar[o + j];
                zbar[base + j] += hb * (z[o + j] * d2[j] + z[oa + j] * z[ob + j] * d3[j]);
                zbar[oa + j] += hb * d2[j] * z[ob + j];
                zbar[ob + j] += hb * d2[j] * z[oa + j];
                zbar[o + j] = hb * d1[j];
            }
        }
    }
}

fn chunk_forward<S: Real>(
    arch: &NetArch,
    theta: &[S],
    q: &JetQuery<S>,
    start: usize,
    count: usize,
) -> ChunkActs<S> {
    let c = q.plan.channels();
    let rows = count * c;
    let layers = layer_offsets(arch);
    let mut acts = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len() - 1);
    acts.push(build_input(arch, q, start, count));
    let mut out = Vec::new();
    for (li, &(fan_out, fan_in, w_off, b_off)) in layers.iter().enumerate() {
        let u = acts.last().expect("input present");
        let mut z = vec![S::zero(); rows * fan_out];
        let w = &theta[w_off..w_off + fan_out * fan_in];
        S::gemm(
            rows,
            fan_in,
            fan_out,
            S::one(),
            u,
            fan_in,
            1,
            w,
            1,
            fan_in,
            S::zero(),
            &mut z,
            fan_out,
            1,
        );
        let b = &theta[b_off..b_off + fan_out];
        for p in 0..count {
            let row = &mut z[p * c * fan_out..p * c * fan_out + fan_out];
            for (zj, bj) in row.iter_mut().zip(b) {
                *zj += *bj;
            }
        }
        if li + 1 == layers.len() {
            out = z;
        } else {
            let mut h = vec![S::zero(); rows * fan_out];
            tanh_jet_forward(&q.plan, &z, &mut h, count, fan_out);
            pre.push(z);
            acts.push(h);
        }
    }
    ChunkActs {
        start,
        count,
        acts,
        pre,
        out,
    }
}

pub(crate) fn forward<S: Real>(arch: &NetArch, theta: &[S], q: &JetQuery<S>) -> JetForward<S> {
    let n = q.len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK_POINTS).collect();
    let chunks = starts
        .par_iter()
        .map(|&s| chunk_forward(arch, theta, q, s, CHUNK_POINTS.min(n - s)))
        .collect();
    JetForward {
        plan: q.plan.clone(),
        n_points: n,
        chunks,
    }
}

/// Gradients produced by [`backward`].
pub(crate) struct BackwardOut<S> {
    pub params: Option<Vec<S>>,
    /// Cotangent on the embedded input rows (`rows x input_dim`, point-major).
    pub input: Option<Vec<S>>,
}

fn chunk_backward<S: Real>(
    arch: &NetArch,
    theta: &[S],
    plan: &JetPlan,
    ch: &ChunkActs<S>,
    cot: &[S],
    want_params: bool,
    want_input: bool,
) -> BackwardOut<S> {
    let c = plan.channels();
    let rows = ch.count * c;
    let layers = layer_offsets(arch);
    let mut grad = if want_params {
        Some(vec![S::zero(); arch.num_params()])
    } else {
        None
    };
    let mut zbar: Vec<S> = cot.to_vec();
    let mut input = None;
    for li in (0..layers.len()).rev() {
        let (fan_out, fan_in, w_off, b_off) = layers[li];
        let u = &ch.acts[li];
        if let Some(g) = grad.as_mut() {
            S::gemm(
                fan_out,
                rows,
                fan_in,
                S::one(),
                &zbar,
                1,
                fan_out,
                u,
                fan_in,
                1,
                S::one(),
                &mut g[w_off..w_off + fan_out * fan_in],
                fan_in,
                1,
            );
            let gb = &mut g[b_off..b_off + fan_out];
            for p in 0..ch.count {
                let row = &zbar[p * c * fan_out..p * c * fan_out + fan_out];
                for (g, z) in gb.iter_mut().zip(row) {
                    *g += *z;
                }
            }
        }
        if li == 0 && !want_input {
            break;
        }
        let w = &theta[w_off..w_off + fan_out * fan_in];
        let mut ubar = vec![S::zero(); rows * fan_in];
        S::gemm(
            rows,
            fan_out,
            fan_in,
            S::one(),
            &zbar,
            fan_out,
            1,
            w,
            fan_in,
            1,
            S::zero(),
            &mut ubar,
            fan_in,
            1,
        );
        if li == 0 {
            input = Some(ubar);
            break;
        }
        let mut zb = vec![S::zero(); rows * fan_in];
        tanh_jet_backward(
            plan,
            &ch.pre[li - 1],
            &ch.acts[li],
            &ubar,
            &mut zb,
            ch.count,
            fan_in,
        );
        zbar = zb;
    }
    BackwardOut {
        params: grad,
        input,
    }
}

/// Pulls output cotangents (one per point-channel, point-major) back to the
/// parameters and/or the embedded inputs.
pub(crate) fn backward<S: Real>(
    arch: &NetArch,
    theta: &[S],
    fwd: &JetForward<S>,
    cot: &[S],
    want_params: bool,
    want_input: bool,
) -> BackwardOut<S> {
    let c = fwd.channels();
    assert_eq!(cot.len(), fwd.n_points * c, "cotangent length");
    let parts: Vec<BackwardOut<S>> = fwd
        .chunks
        .par_iter()
        .map(|ch| {
            let slice = &cot[ch.start * c..(ch.start + ch.count) * c];
            chunk_backward(arch, theta, &fwd.plan, ch, slice, want_params, want_input)
        })
        .collect();
    let mut params: Option<Vec<S>> = None;
    let mut input: Option<Vec<S>> = None;
    for part in parts {
        if let Some(g) = part.params {
            match params.as_mut() {
                None => params = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            }
        }
        if let Some(u) = part.input {
            input.get_or_insert_with(Vec::new).extend(u);
        }
    }
    BackwardOut { params, input }
}
