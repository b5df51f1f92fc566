//! Sketched Gaussian mechanism (SGM) for private federated learning.
//!
//! * [`sketch`]: seeded Gaussian random projections.
//! * [`mechanism`]: clipping and `SG(x; R, ξ) = R·x + ξ`.
//! * [`accountant`]: Rényi-DP accounting, noise calibration and a baseline
//!   subsampled-Gaussian accountant.
//! * [`optim`]: server-side GD, AMSGrad and Adam.
//! * [`fedsim`]: the Fed-SGM simulator and a centralized SGM training loop.
//! * [`tasks`]: desk-scale objectives and Hessian diagnostics.
//! * [`experiment`]: run configuration files, sweeps and output writers.

pub mod accountant;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod linalg;
pub mod mechanism;
pub mod numfmt;
pub mod optim;
pub mod seeding;
pub mod sketch;
pub mod tasks;

pub use error::{Error, Result};
