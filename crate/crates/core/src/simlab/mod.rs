//! Simulation lab: synthetic designs with known answers, a Monte Carlo
//! oracle, baselines and the replication harness.

pub mod dgp;
pub mod dml_d;
pub mod oracle;
pub mod study;

pub use dgp::{generate_dgp, generate_iv_dgp, DgpConfig, NoiseConvention};
pub use dml_d::{baseline_dml_d, DmlDEstimate, DmlDOptions};
pub use oracle::{frozen_oracle, true_quantile_oracle, OracleQuantile};
pub use study::{run_study, Method, Replication, ReplicationReport, StudyConfig};
