//! Expectation propagation with ABC site updates.
//!
//! The posterior is approximated by a Gaussian built from one factor per data
//! chunk. Each factor is refined from the moments of a local hybrid
//! distribution, estimated by rejection sampling against a simulator when the
//! likelihood is intractable.

pub mod abc;
pub mod bessel;
pub mod engine;
pub mod extremes;
pub mod gauss;
pub mod harness;
pub mod model;
pub mod rng;

pub use abc::{AbcConfig, RecyclingEstimator, RejectionAbc};
pub use engine::{run, EpState, EpTrace, Schedule, Termination, UpdatePolicy};
pub use gauss::{MomentParams, NaturalParams};
pub use model::ModelSpec;
