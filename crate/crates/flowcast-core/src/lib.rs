//! Probabilistic forecasting of irregularly sampled multivariate time series.
//!
//! The model couples a continuous-time recurrent cell (hidden state evolved by
//! an ODE between observation events) with a conditional normalizing flow whose
//! Gaussian base distribution is re-parameterized from the hidden state at every
//! event. Everything trains by exact reverse-mode differentiation through the
//! unrolled fixed-step solvers; no adjoint approximation is involved.

pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod flow;
pub mod gbm;
pub mod metrics;
pub mod model;
pub mod ode;
pub mod optim;
pub mod params;
pub mod series;
pub mod tape;
pub mod train;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use config::{JointKind, RunConfig};
pub use eval::{evaluate, Report};
pub use model::Model;
pub use series::{Dataset, Instance, Regularity};
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
pub use train::{train, TrainOutcome};
