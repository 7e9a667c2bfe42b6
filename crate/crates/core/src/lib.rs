//! Deterministic, single-process simulator for federated learning over
//! logically concatenated devices, with plain-averaging, proximal and
//! control-variate baselines, a Dirichlet non-IID partitioner,
//! communication accounting, and a convergence-bound calculator.

pub mod baselines;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;
pub mod runner;
pub mod selection;
pub mod theory;

pub use config::{DatasetKind, ExperimentConfig, Method, SynthConfig};
pub use error::{Result, SimError};
pub use metrics::{account_bytes, MetricsLog, MetricsRow};
pub use params::{weighted_mean, Layout, ParamVector, TensorShape};
pub use runner::{run_experiment, run_suite, ResolvedExperiment, RunOutput};
