//! Factor multivariate stochastic volatility with leverage, realized factors
//! and realized covariance matrices.
//!
//! The crate covers the whole estimation pipeline:
//!
//! * [`types`]: model configuration, parameters, priors, data and latent state;
//! * [`linalg`]: symmetric eigen kernels, matrix log/exp and densities;
//! * [`state_space`]: Kalman filter, disturbance smoother and simulation smoother;
//! * [`preprocess`]: bias correction of realized volatilities and correlations;
//! * [`density`]: the log joint posterior and the analytic derivatives used by
//!   the block samplers;
//! * [`samplers`]: one full-conditional update per MCMC step;
//! * [`driver`]: chain orchestration, storage and checkpointing;
//! * [`diagnostics`]: posterior summaries and inefficiency factors;
//! * [`simulate`]: the forward model;
//! * [`portfolio`]: one-step forecasts, minimum-variance weights and rolling
//!   backtests;
//! * [`checks`]: oracle suites comparing the above against independent references.

pub mod checks;
pub mod density;
pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod io;
pub mod linalg;
pub mod portfolio;
pub mod preprocess;
pub mod samplers;
pub mod simulate;
pub mod state_space;
pub mod types;

pub use error::{Error, Result};
pub use types::{Dataset, LatentState, ModelConfig, Parameters, PriorSpec, Variant};
