//! Market-level and single-investor inverse reinforcement learning with
//! entropy-regularized (free-energy) control, plus the multiplicative
//! mean-reverting market model used to calibrate it.

pub mod entropy_rl;
pub mod error;
pub mod gmr;
pub mod irl_engine;
pub mod linalg;
pub mod model_core;
pub mod optim;
pub mod scalar;
pub mod signals_data;

pub use entropy_rl::{
    BackwardPass, GaussianPolicy, LinearizationPoint, LinearizedDynamics, QuadraticF, QuadraticG,
};
pub use error::{Error, Result};
pub use gmr::{GmrParams, MarketPath};
pub use irl_engine::{EmConfig, EmState, TransitionBatch, VariationalParams};
pub use model_core::{Action, ExtendedState, ModelParams, RewardCoeffs, Trajectory};
pub use scalar::Real;
pub use signals_data::{MarketPanel, SignalPanel};
