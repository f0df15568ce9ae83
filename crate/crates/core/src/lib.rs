//! Simulator for federated learning with stochastic bidirectional parameter
//! updates (SBPU): every client receives its own perturbed copy of the global
//! model, built from the last two global steps.
//!
//! The crate provides the parameter container, quadratic and small-MLP client
//! objectives, the SBPU mutation, round orchestration with optional DP/GC
//! defenses, a convergence harness and three privacy attacks.

pub mod attacks;
pub mod config;
pub mod convergence;
pub mod error;
pub mod exec;
pub mod federation;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod sbpu;

pub use config::{FederationConfig, Manifest, ObjectiveSpec, Preset};
pub use error::{Error, Result};
pub use exec::Execution;
pub use federation::{
    run_federation, run_round, ClientState, DefensePolicy, Federation, RoundRecord, RoundSettings,
};
pub use params::{LayeredParams, Shape};
pub use rng::Stream;
pub use sbpu::{DiversityRates, GlobalHistory, LagMode};

/// Version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
