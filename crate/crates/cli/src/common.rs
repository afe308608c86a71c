//! Shared plumbing: errors, config-file merging, learner specs and report output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ldml::learners::GbtParams;
use ldml::{LdmlError, LearnerConfig, LearnerSet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Ldml(#[from] LdmlError),
    #[error("cannot write report {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Ldml(e) => e.code(),
            CliError::Output { .. } => "OutputError",
        }
    }

    /// 2: bad configuration, 3: unusable input data, 4: estimation failed,
    /// 5: the report could not be written.
    pub fn exit_code(&self) -> u8 {
        use LdmlError::*;
        match self {
            CliError::Config(_) => 2,
            CliError::Output { .. } => 5,
            CliError::Ldml(e) => match e {
                InvalidConfig(_)
                | InvalidKPrime { .. }
                | InvalidGamma(_)
                | MissingInstrument
                | KPrimeTooSmall(_)
                | UnknownMethod(_)
                | ZeroReps
                | NonPositiveBandwidth(_) => 2,
                MissingColumn(_)
                | NonBinaryTreatment { .. }
                | NonFiniteValue { .. }
                | EmptyFile
                | Csv(_)
                | Io(_)
                | TooFewRows { .. } => 3,
                _ => 4,
            },
        }
    }

    pub fn to_json(&self) -> String {
        let obj = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "error": {
                "code": self.code(),
                "message": self.to_string(),
                "exit_code": self.exit_code(),
            }
        });
        obj.to_string()
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Read a JSON config file into the same struct the flags populate.
pub fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))
}

/// Learners given either by name (applied to every slot) or per slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearnerSpec {
    Name(String),
    Set(LearnerSet),
}

impl LearnerSpec {
    pub fn resolve(&self) -> CliResult<LearnerSet> {
        let set = match self {
            LearnerSpec::Set(set) => set.clone(),
            LearnerSpec::Name(name) => LearnerSet::uniform(match name.trim().to_ascii_lowercase().as_str() {
                "gbt" => LearnerConfig::Gbt(GbtParams::default()),
                "logistic" => LearnerConfig::logistic(),
                "ridge" => LearnerConfig::ridge(),
                "constant" => LearnerConfig::Constant,
                other => {
                    return Err(config_error(format!(
                        "unknown learner `{other}` (expected gbt, logistic, ridge or constant)"
                    )))
                }
            }),
        };
        set.validate()?;
        Ok(set)
    }
}

/// Flag parser for `--learners`: a learner name or an inline JSON object.
pub fn parse_learner_spec(s: &str) -> Result<LearnerSpec, String> {
    if s.trim_start().starts_with('{') {
        serde_json::from_str::<LearnerSet>(s)
            .map(LearnerSpec::Set)
            .map_err(|e| e.to_string())
    } else {
        Ok(LearnerSpec::Name(s.to_owned()))
    }
}

/// Size the global pool; `None` keeps rayon's default of one thread per core.
pub fn init_threads(threads: Option<usize>) -> CliResult<()> {
    match threads {
        Some(0) => Err(config_error("threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config_error(format!("cannot size thread pool: {e}"))),
        None => Ok(()),
    }
}

/// Serialize `report` and write it to `output`, or stdout when absent.
///
/// Files are written to a sibling temporary and renamed into place, so the
/// destination only ever holds a complete report.
pub fn emit<T: Serialize>(report: &T, output: Option<&Path>) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(report).map_err(|e| config_error(format!("report is not serializable: {e}")))?;
    text.push('\n');
    let Some(path) = output else {
        let mut stdout = std::io::stdout().lock();
        return stdout.write_all(text.as_bytes()).map_err(|source| CliError::Output {
            path: PathBuf::from("-"),
            source,
        });
    };
    let io = |source| CliError::Output {
        path: path.to_owned(),
        source,
    };
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    fs::write(&partial, text).map_err(io)?;
    fs::rename(&partial, path).map_err(|e| {
        let _ = fs::remove_file(&partial);
        io(e)
    })
}
