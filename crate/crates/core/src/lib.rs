//! Discrete flow matching over finite state spaces, with exact posterior-based
//! and rate-based guidance.
//!
//! Module map:
//!
//! * [`statespace`] lattices `S^D`, dense pmfs, factorized posteriors.
//! * [`paths`] schedulers and conditional probability paths with their rates.
//! * [`ctmc`] Kolmogorov forward integration and the jump samplers.
//! * [`posterior`] exact and learned posteriors `p_{1|t}`.
//! * [`guidance`] posterior-based, rate-based, predictor and first-order guidance.
//! * [`training`] Bregman and density-ratio objectives, approximators, optimizers.
//! * [`energy2d`] the quantized 2-D shape experiments.
//! * [`container`] the binary model format.

pub mod approximator;
pub mod container;
pub mod ctmc;
pub mod energy2d;
pub mod error;
pub mod guidance;
pub mod io;
pub mod optim;
pub mod paths;
pub mod posterior;
pub mod rng;
pub mod statespace;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use paths::{ConditionalPath, Init, PathKind, Scheduler};
pub use statespace::{
    empirical_pmf, enumerate_states, pmf_total_variation, DensityRatio, FactorizedPosterior, Pmf,
    SampleBatch, StateSpace, Symbol,
};
