//! `ldml estimate`: one cross-fitted estimate from a CSV file.

use std::path::PathBuf;

use clap::Args;
use ldml::{
    expectile_moment, load_csv, lqte_moment, quantile_cvar_moment, quantile_moment, run_ldml, run_ldml_effect,
    Aggregate, ColumnSchema, EstimateReport, LdmlConfig, MomentModel, Variant,
};
use serde::{Deserialize, Serialize};

use crate::common::{
    config_error, emit, init_threads, parse_learner_spec, read_config, CliResult, LearnerSpec, SCHEMA_VERSION,
};

/// Flags and config-file keys share names; flags win over the file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateArgs {
    /// JSON file supplying any of the options below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// quantile, quantile_cvar, expectile or lqte.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimand: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instrument: Option<String>,
    /// Comma-separated covariate columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kprime: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<usize>,
    /// ldml1 or ldml2.
    #[arg(long, value_parser = parse_keyword::<Variant>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    /// median or mean.
    #[arg(long, value_parser = parse_keyword::<Aggregate>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Master seed; drawn at random and echoed when omitted.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// gbt, logistic, ridge, constant, or a JSON object with one learner per slot.
    #[arg(long, value_parser = parse_learner_spec)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learners: Option<LearnerSpec>,
    /// Kernel bandwidth for the jacobian; rule of thumb when omitted.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Also estimate the control arm and report the treated-minus-control effect.
    #[arg(long)]
    pub effect: bool,
    /// Report path; stdout when omitted.
    #[arg(long)]
    #[serde(skip_serializing)]
    pub output: Option<PathBuf>,
    /// Worker threads; one per core when omitted.
    #[arg(long)]
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl EstimateArgs {
    fn merge(self, file: EstimateArgs) -> EstimateArgs {
        EstimateArgs {
            config: self.config,
            data: self.data.or(file.data),
            estimand: self.estimand.or(file.estimand),
            gamma: self.gamma.or(file.gamma),
            treatment: self.treatment.or(file.treatment),
            outcome: self.outcome.or(file.outcome),
            instrument: self.instrument.or(file.instrument),
            covariates: self.covariates.or(file.covariates),
            k: self.k.or(file.k),
            kprime: self.kprime.or(file.kprime),
            splits: self.splits.or(file.splits),
            variant: self.variant.or(file.variant),
            aggregate: self.aggregate.or(file.aggregate),
            alpha: self.alpha.or(file.alpha),
            seed: self.seed.or(file.seed),
            learners: self.learners.or(file.learners),
            bandwidth: self.bandwidth.or(file.bandwidth),
            effect: self.effect || file.effect,
            output: self.output.or(file.output),
            threads: self.threads.or(file.threads),
        }
    }
}

/// Parse a lowercase keyword through the type's serde representation.
pub fn parse_keyword<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_lowercase())).map_err(|e| e.to_string())
}

fn moment_for(name: &str, gamma: f64) -> CliResult<(&'static str, MomentModel)> {
    let (canonical, build): (_, fn(f64) -> ldml::Result<MomentModel>) =
        match name.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "quantile" => ("quantile", quantile_moment),
            "quantile_cvar" | "cvar" | "qcvar" => ("quantile_cvar", quantile_cvar_moment),
            "expectile" => ("expectile", expectile_moment),
            "lqte" => ("lqte", lqte_moment),
            other => {
                return Err(config_error(format!(
                    "unknown estimand `{other}` (expected quantile, quantile_cvar, expectile or lqte)"
                )))
            }
        };
    Ok((canonical, build(gamma)?))
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    schema_version: u32,
    command: &'static str,
    config_echo: &'a EstimateArgs,
    #[serde(flatten)]
    report: &'a EstimateReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    arms: Option<Arms<'a>>,
}

#[derive(Serialize)]
struct Arms<'a> {
    treated: &'a EstimateReport,
    control: &'a EstimateReport,
}

pub fn run(args: EstimateArgs) -> CliResult<()> {
    let file = read_config(args.config.as_deref())?;
    let mut args = args.merge(file);
    init_threads(args.threads)?;

    let present = [
        (args.data.is_some(), "data"),
        (args.estimand.is_some(), "estimand"),
        (args.gamma.is_some(), "gamma"),
        (args.treatment.is_some(), "treatment"),
        (args.outcome.is_some(), "outcome"),
    ];
    if let Some((_, name)) = present.iter().find(|(ok, _)| !ok) {
        return Err(config_error(format!("missing required option --{name}")));
    }

    let (canonical, model) = moment_for(
        args.estimand.as_deref().unwrap_or_default(),
        args.gamma.unwrap_or_default(),
    )?;
    let defaults = LdmlConfig::default();
    let learners = match &args.learners {
        Some(spec) => spec.resolve()?,
        None => defaults.learners.clone(),
    };
    let config = LdmlConfig {
        k: args.k.unwrap_or(defaults.k),
        k_prime: args.kprime.unwrap_or(defaults.k_prime),
        splits: args.splits.unwrap_or(defaults.splits),
        variant: args.variant.unwrap_or(defaults.variant),
        aggregate: args.aggregate.unwrap_or(defaults.aggregate),
        alpha: args.alpha.unwrap_or(defaults.alpha),
        seed: args.seed.unwrap_or_else(rand::random),
        bandwidth: args.bandwidth,
        learners,
        ..defaults
    };
    config.validate()?;

    // The echo carries every resolved value, so it can be fed back as --config.
    args.estimand = Some(canonical.to_owned());
    args.k = Some(config.k);
    args.kprime = Some(config.k_prime);
    args.splits = Some(config.splits);
    args.variant = Some(config.variant);
    args.aggregate = Some(config.aggregate);
    args.alpha = Some(config.alpha);
    args.seed = Some(config.seed);
    args.learners = Some(LearnerSpec::Set(config.learners.clone()));

    let schema = ColumnSchema {
        treatment: args.treatment.clone().unwrap_or_default(),
        outcome: args.outcome.clone().unwrap_or_default(),
        instrument: args.instrument.clone(),
        covariates: args.covariates.clone(),
    };
    let data = args.data.clone().unwrap_or_default();
    let table = load_csv(&data, &schema)?;
    log::info!("loaded {} rows from {}", table.n(), data.display());

    if args.effect {
        let effect = run_ldml_effect(&table, &model, &config)?;
        let out = EstimateOutput {
            schema_version: SCHEMA_VERSION,
            command: "estimate",
            config_echo: &args,
            report: &effect.effect,
            arms: Some(Arms {
                treated: &effect.treated,
                control: &effect.control,
            }),
        };
        emit(&out, args.output.as_deref())
    } else {
        let report = run_ldml(&table, &model, &config)?;
        let out = EstimateOutput {
            schema_version: SCHEMA_VERSION,
            command: "estimate",
            config_echo: &args,
            report: &report,
            arms: None,
        };
        emit(&out, args.output.as_deref())
    }
}
