//! Sequential Monte Carlo for state-space models.
//!
//! Bootstrap and auxiliary particle filters, the ensemble Kalman filter,
//! marginal particle smoothing, particle marginal Metropolis-Hastings,
//! tempered SMC samplers and importance splitting for rare events, together
//! with exact Kalman and forward-backward solvers to check them against.

pub mod enkf;
pub mod error;
pub mod filter;
pub mod gaussian;
pub mod model;
pub mod oracle;
pub mod pmcmc;
pub mod rare_event;
pub mod resample;
pub mod rng;
pub mod smc_sampler;
pub mod smooth;
pub mod stats;

pub use error::{Result, SmcError};
pub use model::{Observation, StateSpaceModel};
pub use rng::Seeder;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
