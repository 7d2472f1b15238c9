//! Cost- and memoization-aware Bayesian optimization for multi-stage
//! pipelines.
//!
//! A pipeline is a chain of stages, each with its own hyperparameters and
//! its own cost. The optimizer keeps intermediate outputs of promising
//! configurations and scores candidates by expected improvement per unit of
//! the cost they would actually incur, so reusing a cached prefix is cheap.

pub mod acquisition;
pub mod bench;
pub mod candidates;
pub mod error;
pub mod gp;
pub mod memo;
pub mod optimizer;
pub mod pipeline;
pub mod space;
pub mod trace;

pub use acquisition::{EtaSchedule, Method};
pub use error::{Error, Result};
pub use memo::PrefixPolicy;
pub use optimizer::{Budget, RunConfig};
pub use pipeline::PipelineSpec;
pub use trace::RunTrace;
