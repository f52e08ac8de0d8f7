//! Optimal stochastic transport under a state-cost potential, learned as a
//! single value function that is both a Kantorovich potential and the
//! solution of a Hamilton-Jacobi-Bellman equation.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below pick a concrete precision.

pub mod dynamics;
pub mod error;
pub mod eval;
pub mod losses;
pub mod opinion;
pub mod potentials;
pub mod scalar;
pub mod trainer;
pub mod valuenet;

pub use error::{HotaError, Result};
pub use scalar::Real;
pub use potentials::{Marginal, ObstaclePrimitive, Scenario};
pub use trainer::{Checkpoint, MetricsRow, TrainConfig, TrainState, TransportProblem};
pub use valuenet::{LapMode, NetArch, ParamVector, ValueEval, ValueNet};

pub type ValueNet64 = ValueNet<f64>;
pub type ValueNet32 = ValueNet<f32>;
