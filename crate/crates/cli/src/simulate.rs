//! `ldml simulate`: replication study on the synthetic design.

use std::path::PathBuf;

use clap::Args;
use ldml::simlab::study::study_truth;
use ldml::simlab::{run_study, Method, NoiseConvention, ReplicationReport, StudyConfig};
use serde::{Deserialize, Serialize};

use crate::common::{
    config_error, emit, init_threads, parse_learner_spec, read_config, CliResult, LearnerSpec, SCHEMA_VERSION,
};
use crate::estimate::parse_keyword;

const STUDY_NAME: &str = "paper-sim";

/// Flags and config-file keys share names; flags win over the file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// JSON file supplying any of the options below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Study design; only `paper-sim` is built in.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<String>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    /// Comma-separated subset of ldml, ipw, dml_d.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    /// Master seed (required).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Fold-seed runs per dataset, combined by their median.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kprime: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Noise scale reading: variance or sd.
    #[arg(long, value_parser = parse_keyword::<NoiseConvention>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convention: Option<NoiseConvention>,
    /// Reference value; the frozen Monte Carlo oracle when omitted.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<f64>,
    /// gbt, logistic, ridge, constant, or a JSON object with one learner per slot.
    #[arg(long, value_parser = parse_learner_spec)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learners: Option<LearnerSpec>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    #[serde(skip_serializing)]
    pub output: Option<PathBuf>,
    /// Worker threads; one per core when omitted. Does not affect the report.
    #[arg(long)]
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl SimulateArgs {
    fn merge(self, file: SimulateArgs) -> SimulateArgs {
        SimulateArgs {
            config: self.config,
            study: self.study.or(file.study),
            n: self.n.or(file.n),
            reps: self.reps.or(file.reps),
            methods: self.methods.or(file.methods),
            seed: self.seed.or(file.seed),
            gamma: self.gamma.or(file.gamma),
            runs: self.runs.or(file.runs),
            k: self.k.or(file.k),
            kprime: self.kprime.or(file.kprime),
            alpha: self.alpha.or(file.alpha),
            convention: self.convention.or(file.convention),
            truth: self.truth.or(file.truth),
            learners: self.learners.or(file.learners),
            output: self.output.or(file.output),
            threads: self.threads.or(file.threads),
        }
    }
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    schema_version: u32,
    command: &'static str,
    config_echo: &'a SimulateArgs,
    truth: f64,
    reports: &'a [ReplicationReport],
}

pub fn run(args: SimulateArgs) -> CliResult<()> {
    let file = read_config(args.config.as_deref())?;
    let mut args = args.merge(file);
    init_threads(args.threads)?;

    let study = args.study.get_or_insert_with(|| STUDY_NAME.to_owned());
    if study != STUDY_NAME {
        return Err(config_error(format!("unknown study `{study}` (expected {STUDY_NAME})")));
    }
    let Some(seed) = args.seed else {
        return Err(config_error("missing required option --seed"));
    };
    let defaults = StudyConfig::default();
    let methods = match &args.methods {
        Some(names) => names
            .iter()
            .map(|m| m.parse::<Method>().map_err(|e| config_error(e.to_string())))
            .collect::<CliResult<Vec<_>>>()?,
        None => defaults.methods.clone(),
    };
    let learners = match &args.learners {
        Some(spec) => spec.resolve()?,
        None => defaults.learners.clone(),
    };
    let config = StudyConfig {
        methods,
        n_grid: args.n.clone().unwrap_or(defaults.n_grid.clone()),
        reps: args.reps.unwrap_or(defaults.reps),
        gamma: args.gamma.unwrap_or(defaults.gamma),
        seed,
        runs: args.runs.unwrap_or(defaults.runs),
        k: args.k.unwrap_or(defaults.k),
        k_prime: args.kprime.unwrap_or(defaults.k_prime),
        learners,
        convention: args.convention.unwrap_or(defaults.convention),
        alpha: args.alpha.unwrap_or(defaults.alpha),
        truth: args.truth,
        ..defaults
    };
    let truth = study_truth(&config)?;

    args.n = Some(config.n_grid.clone());
    args.reps = Some(config.reps);
    args.methods = Some(config.methods.iter().map(|m| m.label().to_owned()).collect());
    args.gamma = Some(config.gamma);
    args.runs = Some(config.runs);
    args.k = Some(config.k);
    args.kprime = Some(config.k_prime);
    args.alpha = Some(config.alpha);
    args.convention = Some(config.convention);
    args.learners = Some(LearnerSpec::Set(config.learners.clone()));

    let reports = run_study(&StudyConfig {
        truth: Some(truth),
        ..config
    })?;
    let out = SimulateOutput {
        schema_version: SCHEMA_VERSION,
        command: "simulate",
        config_echo: &args,
        truth,
        reports: &reports,
    };
    emit(&out, args.output.as_deref())
}
