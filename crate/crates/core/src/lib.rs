//! Neural-network feedback control for discretized mean-field-type stochastic
//! control problems.
//!
//! The crate is organized along the pipeline it implements:
//!
//! - [`dynamics`]: the discretized problem, noise sampling, ensemble rollouts
//!   with empirical-mean coupling and the sample-average cost.
//! - [`optimizer`]: sample-average trajectory optimization producing the
//!   supervised-learning dataset.
//! - [`nn`]: a from-scratch multilayer perceptron, its training loop and the
//!   controller file format.
//! - [`stability`]: closed-loop simulation and Monte Carlo containment
//!   estimates with Wilson intervals.
//! - [`attack`]: projected-gradient search for adversarial initial states.
//! - [`retrain`]: harvesting adversarial states and retraining on the
//!   augmented dataset.
//! - [`lq`]: the linear-quadratic benchmark, its exact Riccati oracle and the
//!   end-to-end experiment.
//!
//! All randomness flows from explicit 64-bit seeds through keyed streams (see
//! [`rng`]), so every result is reproducible independently of thread count.

pub mod attack;
pub mod dynamics;
mod error;
pub mod io;
pub mod linalg;
pub mod lq;
pub mod nn;
pub mod optimizer;
pub mod retrain;
pub mod rng;
pub mod stability;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
