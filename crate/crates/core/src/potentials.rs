//! Benchmark scenarios: obstacle geometry, the state cost `U`, marginal
//! samplers and per-scenario hyperparameters.
//!
//! Geometry is stored in `f64` regardless of the training precision. `U` is
//! only ever evaluated pointwise, so the non-smooth primitives never need a
//! derivative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HotaError, Result};
use crate::scalar::Real;

/// One obstacle shape. Every primitive maps a point into `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObstaclePrimitive {
    /// `exp(-½ Σ (x_i - c_i)² / var_i)` with a diagonal covariance.
    GaussianBump { center: Vec<f64>, cov: Vec<f64> },
    /// 1 inside the ellipse, smooth falloff over `softness` in normalized radius.
    Ellipse {
        center: Vec<f64>,
        radii: Vec<f64>,
        softness: f64,
    },
    /// 1 inside the box, linear falloff over `softness` outside it.
    AxisBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
        softness: f64,
    },
    /// Slab `|x_axis - position| <= thickness/2`, open where the coordinate
    /// along `(axis + 1) mod d` lies in `[gap_lo, gap_hi]`.
    WallWithGap {
        axis: usize,
        position: f64,
        thickness: f64,
        gap_lo: f64,
        gap_hi: f64,
        softness: f64,
    },
    /// Solid ball of `radius`, fading to 0 across the outer `thickness`.
    SphereShell {
        center: Vec<f64>,
        radius: f64,
        thickness: f64,
    },
    /// Barrier where `y² >= a + b x²` with `x = x_1 - c_1`, `y = x_2 - c_2`,
    /// fading in over `softness` in units of `y² - a - b x²`.
    Neck {
        center: Vec<f64>,
        a: f64,
        b: f64,
        softness: f64,
    },
}

/// Cubic smoothstep on `[0, 1]`.
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// 1 at `dist <= 0`, linear down to 0 at `dist >= softness`.
fn ramp(dist: f64, softness: f64) -> f64 {
    if dist <= 0.0 {
        1.0
    } else if softness <= 0.0 {
        0.0
    } else {
        (1.0 - dist / softness).max(0.0)
    }
}

fn shifted(v: &[f64], s: &[f64]) -> Vec<f64> {
    v.iter().zip(s).map(|(a, b)| a + b).collect()
}

impl ObstaclePrimitive {
    /// Dimension the primitive was declared for, if it pins one down.
    fn declared_dim(&self) -> Option<usize> {
        match self {
            ObstaclePrimitive::GaussianBump { center, .. }
            | ObstaclePrimitive::Ellipse { center, .. }
            | ObstaclePrimitive::SphereShell { center, .. } => Some(center.len()),
            ObstaclePrimitive::AxisBox { lo, .. } => Some(lo.len()),
            ObstaclePrimitive::WallWithGap { .. } | ObstaclePrimitive::Neck { .. } => None,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(HotaError::InvalidArgument(m.to_string()));
        if let Some(d) = self.declared_dim() {
            if d != dim {
                return Err(HotaError::DimensionMismatch {
                    expected: dim,
                    got: d,
                });
            }
        }
        match self {
            ObstaclePrimitive::GaussianBump { cov, .. } => {
                if cov.len() != dim || cov.iter().any(|&v| !(v > 0.0)) {
                    return bad("gaussian_bump needs positive per-axis variances");
                }
            }
            ObstaclePrimitive::Ellipse { radii, softness, .. } => {
                if radii.len() != dim || radii.iter().any(|&r| !(r > 0.0)) || *softness < 0.0 {
                    return bad("ellipse needs positive radii and softness >= 0");
                }
            }
            ObstaclePrimitive::AxisBox { lo, hi, softness } => {
                if hi.len() != dim || lo.iter().zip(hi).any(|(a, b)| a > b) || *softness < 0.0 {
                    return bad("axis_box needs lo <= hi and softness >= 0");
                }
            }
            ObstaclePrimitive::WallWithGap {
                axis,
                thickness,
                gap_lo,
                gap_hi,
                softness,
                ..
            } => {
                if *axis >= dim || dim < 2 || *thickness < 0.0 || gap_lo > gap_hi || *softness < 0.0
                {
                    return bad("wall_with_gap needs axis < d, d >= 2, gap_lo <= gap_hi");
                }
            }
            ObstaclePrimitive::SphereShell {
                radius, thickness, ..
            } => {
                if !(*radius > 0.0) || *thickness < 0.0 || thickness > radius {
                    return bad("sphere_shell needs 0 <= thickness <= radius");
                }
            }
            ObstaclePrimitive::Neck {
                center, softness, ..
            } => {
                if dim < 2 || center.len() != 2 || !(*softness > 0.0) {
                    return bad("neck needs d >= 2, a 2-d center and softness > 0");
                }
            }
        }
        Ok(())
    }

    /// Value in `[0, 1]` at `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ObstaclePrimitive::GaussianBump { center, cov } => {
                let q: f64 = x
                    .iter()
                    .zip(center)
                    .zip(cov)
                    .map(|((xi, ci), vi)| (xi - ci) * (xi - ci) / vi)
                    .sum();
                (-0.5 * q).exp()
            }
            ObstaclePrimitive::Ellipse {
                center,
                radii,
                softness,
            } => {
                let q: f64 = x
                    .iter()
                    .zip(center)
                    .zip(radii)
                    .map(|((xi, ci), ri)| ((xi - ci) / ri).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if q <= 1.0 {
                    1.0
                } else if *softness <= 0.0 {
                    0.0
                } else {
                    smoothstep(1.0 - (q - 1.0) / softness)
                }
            }
            ObstaclePrimitive::AxisBox { lo, hi, softness } => {
                let dist = x
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(&xi, (&l, &h))| (l - xi).max(xi - h).max(0.0))
                    .fold(0.0, f64::max);
                ramp(dist, *softness)
            }
            ObstaclePrimitive::WallWithGap {
                axis,
                position,
                thickness,
                gap_lo,
                gap_hi,
                softness,
            } => {
                let g = (axis + 1) % x.len();
                let across = ((x[*axis] - position).abs() - 0.5 * thickness).max(0.0);
                let along = if x[g] >= *gap_lo && x[g] <= *gap_hi {
                    (x[g] - gap_lo).min(gap_hi - x[g])
                } else {
                    0.0
                };
                ramp(across.max(along), *softness)
            }
            ObstaclePrimitive::SphereShell {
                center,
                radius,
                thickness,
            } => {
                let r = x
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let inner = radius - thickness;
                if r <= inner {
                    1.0
                } else if r >= *radius {
                    0.0
                } else {
                    smoothstep((radius - r) / thickness)
                }
            }
            ObstaclePrimitive::Neck {
                center,
                a,
                b,
                softness,
            } => {
                let u = x[0] - center[0];
                let v = x[1] - center[1];
                let g = v * v - a - b * u * u;
                smoothstep(1.0 + g / softness)
            }
        }
    }

    /// The same primitive moved by `shift`.
    pub fn translated(&self, shift: &[f64]) -> Self {
        let mut p = self.clone();
        match &mut p {
            ObstaclePrimitive::GaussianBump { center, .. }
            | ObstaclePrimitive::Ellipse { center, .. }
            | ObstaclePrimitive::SphereShell { center, .. } => *center = shifted(center, shift),
            ObstaclePrimitive::AxisBox { lo, hi, .. } => {
                *lo = shifted(lo, shift);
                *hi = shifted(hi, shift);
            }
            ObstaclePrimitive::WallWithGap {
                axis,
                position,
                gap_lo,
                gap_hi,
                ..
            } => {
                let g = (*axis + 1) % shift.len();
                *position += shift[*axis];
                *gap_lo += shift[g];
                *gap_hi += shift[g];
            }
            ObstaclePrimitive::Neck { center, .. } => {
                *center = shifted(center, &shift[..2]);
            }
        }
        p
    }
}

/// Source or target distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    /// Diagonal Gaussian.
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    /// Equal-weight mixture of diagonal Gaussians sharing `var`.
    Mixture { means: Vec<Vec<f64>>, var: Vec<f64> },
    /// `N(pole, var I)` projected radially onto the unit sphere.
    SpherePole { pole: Vec<f64>, var: f64 },
}

impl Marginal {
    fn dim(&self) -> usize {
        match self {
            Marginal::Gaussian { mean, .. } => mean.len(),
            Marginal::Mixture { var, .. } => var.len(),
            Marginal::SpherePole { pole, .. } => pole.len(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(HotaError::DimensionMismatch {
                expected: dim,
                got: self.dim(),
            });
        }
        let ok = match self {
            Marginal::Gaussian { var, .. } => var.len() == dim && var.iter().all(|&v| v >= 0.0),
            Marginal::Mixture { means, var } => {
                !means.is_empty()
                    && means.iter().all(|m| m.len() == dim)
                    && var.iter().all(|&v| v >= 0.0)
            }
            Marginal::SpherePole { var, .. } => *var >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(HotaError::InvalidArgument("malformed marginal".into()))
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Marginal::Gaussian { mean, .. } => mean.clone(),
            Marginal::Mixture { means, var } => {
                let mut m = vec![0.0; var.len()];
                for c in means {
                    m.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                }
                m.iter().map(|a| a / means.len() as f64).collect()
            }
            Marginal::SpherePole { pole, .. } => pole.clone(),
        }
    }

    /// `n` points, flattened row-major, from a generator seeded by `seed`.
    pub fn sample<S: Real>(&self, n: usize, seed: u64) -> Vec<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        let mut buf = vec![0.0f64; d];
        for _ in 0..n {
            match self {
                Marginal::Gaussian { mean, var } => {
                    for i in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        buf[i] = mean[i] + var[i].sqrt() * z;
                    }
                }
                Marginal::Mixture { means, var } => {
                    let c = &means[rng.random_range(0..means.len())];
                    for i in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        buf[i] = c[i] + var[i].sqrt() * z;
                    }
                }
                Marginal::SpherePole { pole, var } => loop {
                    for i in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        buf[i] = pole[i] + var.sqrt() * z;
                    }
                    let r = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if r > 1e-6 {
                        buf.iter_mut().for_each(|v| *v /= r);
                        break;
                    }
                },
            }
            out.extend(buf.iter().map(|&v| S::lit(v)));
        }
        out
    }
}

/// A complete benchmark problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub dim: usize,
    /// Potential weight `w`; `U = w · max_k primitive_k`.
    pub weight: f64,
    pub sigma: f64,
    pub lambda_hjb: f64,
    pub lambda_a: f64,
    pub alpha: Marginal,
    pub beta: Marginal,
    #[serde(default)]
    pub primitives: Vec<ObstaclePrimitive>,
}

/// Names accepted by [`Scenario::preset`].
pub const PRESETS: &[&str] = &[
    "stunnel",
    "vneck",
    "gmm",
    "babymaze",
    "slit",
    "box",
    "sphere",
    "point_mass",
];

fn gauss(mean: &[f64], var: f64) -> Marginal {
    Marginal::Gaussian {
        mean: mean.to_vec(),
        var: vec![var; mean.len()],
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(HotaError::InvalidArgument("dim must be positive".into()));
        }
        let finite = [self.weight, self.sigma, self.lambda_hjb, self.lambda_a];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(HotaError::InvalidArgument(
                "weight, sigma and lambdas must be finite and nonnegative".into(),
            ));
        }
        self.alpha.validate(self.dim)?;
        self.beta.validate(self.dim)?;
        for p in &self.primitives {
            p.validate(self.dim)?;
        }
        Ok(())
    }

    /// Built-in scenario by name. `dim` is used by `sphere` only.
    pub fn preset(name: &str, dim: usize) -> Result<Self> {
        let s = match name {
            "stunnel" => Scenario {
                name: "stunnel".into(),
                dim: 2,
                weight: 25.0,
                sigma: 0.3,
                lambda_hjb: 1.0,
                lambda_a: 1e-4,
                alpha: gauss(&[-2.2, -0.2], 0.02),
                beta: gauss(&[2.2, 0.2], 0.02),
                primitives: vec![
                    ObstaclePrimitive::Ellipse {
                        center: vec![-1.0, -0.7],
                        radii: vec![0.5, 0.7],
                        softness: 1.0,
                    },
                    ObstaclePrimitive::Ellipse {
                        center: vec![1.0, 0.7],
                        radii: vec![0.5, 0.7],
                        softness: 1.0,
                    },
                ],
            },
            "vneck" => Scenario {
                name: "vneck".into(),
                dim: 2,
                weight: 1000.0,
                sigma: 0.2,
                lambda_hjb: 2.0,
                lambda_a: 1e-3,
                alpha: gauss(&[-7.0, 0.0], 0.2),
                beta: gauss(&[7.0, 0.0], 0.2),
                primitives: vec![ObstaclePrimitive::Neck {
                    center: vec![0.0, 0.0],
                    a: 0.5,
                    b: 0.2,
                    softness: 0.25,
                }],
            },
            "gmm" => {
                let r = 8.0 / 2f64.sqrt();
                Scenario {
                    name: "gmm".into(),
                    dim: 2,
                    weight: 25.0,
                    sigma: 0.1,
                    lambda_hjb: 0.7,
                    lambda_a: 0.2,
                    alpha: gauss(&[0.0, 0.0], 0.3),
                    beta: Marginal::Mixture {
                        means: vec![vec![r, r], vec![-r, r], vec![-r, -r], vec![r, -r]],
                        var: vec![0.3, 0.3],
                    },
                    primitives: [[4.0, 0.0], [0.0, 4.0], [-4.0, 0.0], [0.0, -4.0]]
                        .iter()
                        .map(|c| ObstaclePrimitive::GaussianBump {
                            center: c.to_vec(),
                            cov: vec![1.0, 1.0],
                        })
                        .collect(),
                }
            }
            "babymaze" => Scenario {
                name: "babymaze".into(),
                dim: 2,
                weight: 10.0,
                sigma: 0.03,
                lambda_hjb: 0.5,
                lambda_a: 0.05,
                alpha: gauss(&[-0.7, -0.7], 0.005),
                beta: gauss(&[0.7, 0.7], 0.005),
                primitives: vec![
                    ObstaclePrimitive::WallWithGap {
                        axis: 1,
                        position: -1.0 / 3.0,
                        thickness: 0.1,
                        gap_lo: 0.4,
                        gap_hi: 1e3,
                        softness: 0.02,
                    },
                    ObstaclePrimitive::WallWithGap {
                        axis: 1,
                        position: 1.0 / 3.0,
                        thickness: 0.1,
                        gap_lo: -1e3,
                        gap_hi: -0.4,
                        softness: 0.02,
                    },
                ],
            },
            "slit" => Scenario {
                name: "slit".into(),
                dim: 2,
                weight: 30.0,
                sigma: 0.05,
                lambda_hjb: 2.0,
                lambda_a: 1e-3,
                alpha: gauss(&[-1.0, 0.0], 0.05),
                beta: gauss(&[1.0, 0.0], 0.05),
                primitives: vec![ObstaclePrimitive::WallWithGap {
                    axis: 0,
                    position: 0.0,
                    thickness: 0.1,
                    gap_lo: -0.1,
                    gap_hi: 0.1,
                    softness: 0.02,
                }],
            },
            "box" => Scenario {
                name: "box".into(),
                dim: 2,
                weight: 700.0,
                sigma: 0.03,
                lambda_hjb: 0.3,
                lambda_a: 0.01,
                alpha: gauss(&[-1.0, 0.0], 0.05),
                beta: gauss(&[1.0, 0.0], 0.05),
                primitives: vec![ObstaclePrimitive::AxisBox {
                    lo: vec![-0.25, -0.25],
                    hi: vec![0.25, 0.25],
                    softness: 0.02,
                }],
            },
            "sphere" => {
                if dim < 2 {
                    return Err(HotaError::InvalidArgument("sphere needs d >= 2".into()));
                }
                let mut north = vec![0.0; dim];
                north[dim - 1] = 1.0;
                let south: Vec<f64> = north.iter().map(|v| -v).collect();
                Scenario {
                    name: format!("sphere{dim}"),
                    dim,
                    weight: if dim <= 3 { 10.0 } else { 30.0 },
                    sigma: 0.01,
                    lambda_hjb: 0.4,
                    lambda_a: 0.0,
                    alpha: Marginal::SpherePole {
                        pole: north,
                        var: 0.05,
                    },
                    beta: Marginal::SpherePole {
                        pole: south,
                        var: 0.05,
                    },
                    primitives: vec![ObstaclePrimitive::SphereShell {
                        center: vec![0.0; dim],
                        radius: 1.0,
                        thickness: 0.02,
                    }],
                }
            }
            "point_mass" => Scenario {
                name: "point_mass".into(),
                dim: 2,
                weight: 0.0,
                sigma: 0.05,
                lambda_hjb: 1.0,
                lambda_a: 0.0,
                alpha: gauss(&[-0.5, 0.0], 1e-4),
                beta: gauss(&[0.5, 0.0], 1e-4),
                primitives: Vec::new(),
            },
            other => {
                return Err(HotaError::InvalidArgument(format!(
                    "unknown scenario {other:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        s.validate()?;
        Ok(s)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(HotaError::DimensionMismatch {
                expected: self.dim,
                got: len,
            });
        }
        Ok(())
    }

    /// Largest primitive value at `x`, in `[0, 1]`.
    pub fn obstacle_level(&self, x: &[f64]) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.eval(x))
            .fold(0.0, f64::max)
    }

    /// `U(x) = w · max_k primitive_k(x)`.
    pub fn eval_potential<S: Real>(&self, x: &[S]) -> Result<S> {
        self.check_dim(x.len())?;
        let xf: Vec<f64> = x.iter().map(|v| v.f64()).collect();
        Ok(S::lit(self.weight * self.obstacle_level(&xf)))
    }

    /// `U` at every point of a row-major batch.
    pub fn eval_potential_batch<S: Real>(&self, points: &[S]) -> Result<Vec<S>> {
        if points.len() % self.dim != 0 {
            return Err(HotaError::DimensionMismatch {
                expected: self.dim,
                got: points.len() % self.dim,
            });
        }
        if self.primitives.is_empty() {
            return Ok(vec![S::zero(); points.len() / self.dim]);
        }
        let mut xf = vec![0.0; self.dim];
        Ok(points
            .chunks(self.dim)
            .map(|x| {
                xf.iter_mut().zip(x).for_each(|(a, b)| *a = b.f64());
                S::lit(self.weight * self.obstacle_level(&xf))
            })
            .collect())
    }

    pub fn sample_alpha<S: Real>(&self, n: usize, seed: u64) -> Result<Vec<S>> {
        if n == 0 {
            return Err(HotaError::Empty("sample request"));
        }
        Ok(self.alpha.sample(n, seed))
    }

    pub fn sample_beta<S: Real>(&self, n: usize, seed: u64) -> Result<Vec<S>> {
        if n == 0 {
            return Err(HotaError::Empty("sample request"));
        }
        Ok(self.beta.sample(n, seed))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HotaError::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| HotaError::Format(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}
