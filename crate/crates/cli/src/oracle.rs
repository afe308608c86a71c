//! `ldml oracle`: Monte Carlo reference quantile of the treated potential outcome.

use std::path::PathBuf;

use clap::Args;
use ldml::simlab::oracle::ORACLE_SEED;
use ldml::simlab::{true_quantile_oracle, NoiseConvention, OracleQuantile};
use ldml::Execution;
use serde::Serialize;

use crate::common::{emit, init_threads, CliResult, SCHEMA_VERSION};
use crate::estimate::parse_keyword;

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 2.0 / 3.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 10_000_000)]
    pub draws: usize,
    #[arg(long, default_value_t = ORACLE_SEED)]
    pub seed: u64,
    /// Noise scale reading: variance or sd.
    #[arg(long, value_parser = parse_keyword::<NoiseConvention>, default_value = "variance")]
    pub convention: NoiseConvention,
    #[arg(long)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

#[derive(Serialize)]
struct OracleOutput<'a> {
    schema_version: u32,
    command: &'static str,
    config_echo: &'a OracleArgs,
    oracle: OracleQuantile,
}

pub fn run(args: OracleArgs) -> CliResult<()> {
    init_threads(args.threads)?;
    let oracle = true_quantile_oracle(args.gamma, args.draws, args.seed, args.convention, Execution::Parallel)?;
    let out = OracleOutput {
        schema_version: SCHEMA_VERSION,
        command: "oracle",
        config_echo: &args,
        oracle,
    };
    emit(&out, args.output.as_deref())
}
