//! Identification of stochastic switching dynamical systems.
//!
//! Fits models that alternate among `d` subsystems — a softmax switching
//! mechanism over lagged-output/input regressors, plus per-mode emission
//! distributions from a family of exponential-type and heavy-tailed laws —
//! by majorization-minimization: each iteration smooths the latent modes
//! with a forward-backward pass, builds a convex surrogate that is tight at
//! the current iterate, and solves the decoupled switching and emission
//! subproblems (closed forms where available, damped Newton otherwise).
//! Fitted models are evaluated by simulation and prediction metrics.

pub mod data;
pub mod driver;
pub mod error;
pub mod families;
pub mod likelihood;
pub mod metrics;
pub mod modelfile;
pub mod mstep;
pub mod posterior;
pub mod predict;

pub use error::{Error, Result};
