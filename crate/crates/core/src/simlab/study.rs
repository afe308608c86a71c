//! Replication harness: repeated datasets, three fold-seed runs per dataset,
//! MSE against the oracle and normal-interval coverage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ObservationTable;
use crate::engine::{run_ldml, LdmlConfig, LearnerSet};
use crate::error::{LdmlError, Result};
use crate::estimands::{ipw_moment, quantile_moment};
use crate::inference::normal_quantile;
use crate::learners::{GbtParams, LearnerConfig};
use crate::par::{derive_seed, map_indices, Execution};

use super::dgp::{generate_dgp, DgpConfig, NoiseConvention};
use super::dml_d::{baseline_dml_d, DmlDOptions};
use super::oracle::{frozen_oracle, true_quantile_oracle, ORACLE_SEED};

const DATA_TAG: u64 = 0xda7a;
const ORACLE_DRAWS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ldml,
    Ipw,
    DmlD,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ldml => "ldml",
            Method::Ipw => "ipw",
            Method::DmlD => "dml_d",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Method::Ldml => 1,
            Method::Ipw => 2,
            Method::DmlD => 3,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = LdmlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ldml" => Ok(Method::Ldml),
            "ipw" => Ok(Method::Ipw),
            "dml_d" | "dml-d" | "dmld" => Ok(Method::DmlD),
            other => Err(LdmlError::UnknownMethod(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub methods: Vec<Method>,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub gamma: f64,
    pub seed: u64,
    /// Fold-seed runs per dataset, combined by their median.
    pub runs: usize,
    pub k: usize,
    pub k_prime: usize,
    pub learners: LearnerSet,
    pub convention: NoiseConvention,
    pub alpha: f64,
    /// Reference value; `None` uses the frozen oracle or computes one.
    pub truth: Option<f64>,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Ldml, Method::Ipw, Method::DmlD],
            n_grid: vec![1600, 6400],
            reps: 75,
            gamma: 2.0 / 3.0,
            seed: 0,
            runs: 3,
            k: 5,
            k_prime: 2,
            learners: study_learners(),
            convention: NoiseConvention::Variance,
            alpha: 0.05,
            truth: None,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
    /// Estimates of the individual fold-seed runs.
    pub runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub method: Method,
    pub n: usize,
    pub reps: usize,
    pub gamma: f64,
    pub truth: f64,
    pub bias: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub replications: Vec<Replication>,
}

/// Boosted trees shared by every method and nuisance in the study: 50 trees
/// of depth 3, learning rate 0.1, at least 20 rows per leaf.
pub fn study_learners() -> LearnerSet {
    LearnerSet::uniform(LearnerConfig::Gbt(GbtParams {
        trees: 50,
        max_depth: 3,
        learning_rate: 0.1,
        min_leaf: 20,
        ..Default::default()
    }))
}

/// One run: point estimate and `sd(influence)/sqrt(n)`.
fn run_method(method: Method, table: &ObservationTable, config: &StudyConfig, seed: u64) -> Result<(f64, f64)> {
    let n = table.n() as f64;
    let from_influence = |theta: f64, influence: &[f64]| {
        let m = influence.len() as f64;
        let mean = influence.iter().sum::<f64>() / m;
        let var = influence.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        (theta, (var / n).sqrt())
    };
    match method {
        Method::Ldml | Method::Ipw => {
            let base = quantile_moment(config.gamma)?;
            let model = if method == Method::Ipw { ipw_moment(&base) } else { base };
            let ldml = LdmlConfig {
                k: config.k,
                k_prime: config.k_prime,
                splits: 1,
                learners: config.learners.clone(),
                seed,
                alpha: config.alpha,
                execution: Execution::Sequential,
                ..Default::default()
            };
            let report = run_ldml(table, &model, &ldml)?;
            let split = &report.splits[0];
            let influence: Vec<f64> = split.influence.iter().map(|v| v[0]).collect();
            Ok(from_influence(split.theta[0], &influence))
        }
        Method::DmlD => {
            let opts = DmlDOptions {
                k: config.k,
                learners: config.learners.clone(),
                seed,
                execution: Execution::Sequential,
                ..Default::default()
            };
            let est = baseline_dml_d(table, config.gamma, &opts)?;
            Ok(from_influence(est.theta, &est.influence))
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
}

/// Resolve the reference value for `config`.
pub fn study_truth(config: &StudyConfig) -> Result<f64> {
    if let Some(t) = config.truth {
        return Ok(t);
    }
    if let Some(o) = frozen_oracle(config.gamma, config.convention) {
        return Ok(o.theta);
    }
    log::info!(
        "no frozen oracle for gamma={}; simulating {ORACLE_DRAWS} draws",
        config.gamma
    );
    Ok(true_quantile_oracle(
        config.gamma,
        ORACLE_DRAWS,
        ORACLE_SEED,
        config.convention,
        config.execution,
    )?
    .theta)
}

fn validate(config: &StudyConfig) -> Result<()> {
    if config.reps == 0 {
        return Err(LdmlError::ZeroReps);
    }
    if !(config.gamma > 0.0 && config.gamma < 1.0) {
        return Err(LdmlError::InvalidGamma(config.gamma));
    }
    if config.runs == 0 {
        return Err(LdmlError::InvalidConfig("runs must be at least 1".into()));
    }
    if config.methods.is_empty() || config.n_grid.is_empty() {
        return Err(LdmlError::InvalidConfig("methods and n_grid must be nonempty".into()));
    }
    if let Some(&n) = config.n_grid.iter().find(|&&n| n == 0) {
        return Err(LdmlError::InvalidConfig(format!("sample size {n} is invalid")));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(LdmlError::InvalidConfig(format!(
            "alpha must lie in (0,1), got {}",
            config.alpha
        )));
    }
    config
        .learners
        .get(crate::estimands::LearnerSlot::Propensity)
        .validate()?;
    config.learners.get(crate::estimands::LearnerSlot::Localized).validate()
}

/// Run every method at every sample size. Datasets are shared across
/// methods: replication `r` at size `n` uses the same table for each method.
pub fn run_study(config: &StudyConfig) -> Result<Vec<ReplicationReport>> {
    validate(config)?;
    let truth = study_truth(config)?;
    let z = normal_quantile(1.0 - config.alpha / 2.0);
    let mut reports = Vec::new();
    for &n in &config.n_grid {
        for &method in &config.methods {
            let reps = map_indices(config.execution, config.reps, |rep| -> Result<Replication> {
                let table = generate_dgp(&DgpConfig {
                    n,
                    seed: derive_seed(config.seed, &[DATA_TAG, n as u64, rep as u64]),
                    convention: config.convention,
                })?;
                let mut thetas = Vec::with_capacity(config.runs);
                let mut ses = Vec::with_capacity(config.runs);
                for r in 0..config.runs {
                    let seed = derive_seed(config.seed, &[method.tag(), n as u64, rep as u64, r as u64]);
                    let (theta, se) = run_method(method, &table, config, seed)?;
                    thetas.push(theta);
                    ses.push(se);
                }
                let estimate = median(&thetas);
                let stderr = median(&ses) + sample_sd(&thetas) / (config.runs as f64).sqrt();
                let (lower, upper) = (estimate - z * stderr, estimate + z * stderr);
                Ok(Replication {
                    rep,
                    estimate,
                    stderr,
                    lower,
                    upper,
                    covered: lower <= truth && truth <= upper,
                    runs: thetas,
                })
            });
            let replications = reps.into_iter().collect::<Result<Vec<_>>>()?;
            reports.push(summarize(method, n, config.gamma, truth, replications));
        }
    }
    Ok(reports)
}

/// MSE and coverage with their Monte Carlo standard errors.
pub fn summarize(
    method: Method,
    n: usize,
    gamma: f64,
    truth: f64,
    replications: Vec<Replication>,
) -> ReplicationReport {
    let reps = replications.len();
    let m = reps as f64;
    let sq: Vec<f64> = replications.iter().map(|r| (r.estimate - truth).powi(2)).collect();
    let mse = sq.iter().sum::<f64>() / m;
    let bias = replications.iter().map(|r| r.estimate - truth).sum::<f64>() / m;
    let coverage = replications.iter().filter(|r| r.covered).count() as f64 / m;
    ReplicationReport {
        method,
        n,
        reps,
        gamma,
        truth,
        bias,
        mse,
        mse_se: sample_sd(&sq) / m.sqrt(),
        coverage,
        coverage_se: (coverage * (1.0 - coverage) / m).sqrt(),
        replications,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimands::Obs;
    use crate::learners::OracleFn;
    use crate::simlab::dgp::true_propensity;

    fn small(methods: Vec<Method>) -> StudyConfig {
        StudyConfig {
            methods,
            n_grid: vec![300],
            reps: 2,
            learners: LearnerSet::uniform(LearnerConfig::logistic()),
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_reps_is_rejected() {
        let c = StudyConfig {
            reps: 0,
            ..small(vec![Method::Ipw])
        };
        assert!(matches!(run_study(&c), Err(LdmlError::ZeroReps)));
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("ldml".parse::<Method>().unwrap(), Method::Ldml);
        assert_eq!("dml_d".parse::<Method>().unwrap(), Method::DmlD);
        assert!(matches!("forest".parse::<Method>(), Err(LdmlError::UnknownMethod(_))));
    }

    #[test]
    fn same_seed_same_report() {
        let c = small(vec![Method::Ldml, Method::Ipw]);
        let a = run_study(&c).unwrap();
        let b = run_study(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for r in &a {
            let c = r.coverage;
            assert_eq!(r.coverage_se, (c * (1.0 - c) / r.reps as f64).sqrt());
        }
    }

    #[test]
    fn estimates_stay_within_the_treated_range() {
        let c = small(vec![Method::Ldml]);
        let report = &run_study(&c).unwrap()[0];
        for rep in &report.replications {
            let table = generate_dgp(&DgpConfig {
                n: 300,
                seed: derive_seed(c.seed, &[DATA_TAG, 300, rep.rep as u64]),
                convention: c.convention,
            })
            .unwrap();
            let ys: Vec<f64> = Obs::rows(&table).into_iter().filter(|o| o.t).map(|o| o.y).collect();
            let (lo, hi) = ys
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
            assert!(lo <= rep.estimate && rep.estimate <= hi);
        }
    }

    #[test]
    fn ipw_with_true_propensity_improves_with_n() {
        let c = StudyConfig {
            methods: vec![Method::Ipw],
            n_grid: vec![200, 3200],
            reps: 20,
            runs: 1,
            learners: LearnerSet::uniform(LearnerConfig::Oracle(OracleFn::new(true_propensity))),
            seed: 3,
            ..Default::default()
        };
        let r = run_study(&c).unwrap();
        assert!(r[1].mse < r[0].mse, "{} vs {}", r[1].mse, r[0].mse);
    }
}
