use thiserror::Error;

pub type Result<T, E = LdmlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LdmlError {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` must be 0 or 1, found `{value}`")]
    NonBinaryTreatment { row: usize, column: String, value: String },
    #[error("row {row}: column `{column}` has non-finite or unparsable value `{value}`")]
    NonFiniteValue { row: usize, column: String, value: String },
    #[error("input contains no data rows")]
    EmptyFile,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("K'={k_prime} is invalid for K={k}: need 1 <= K' <= K-2")]
    InvalidKPrime { k: usize, k_prime: usize },
    #[error("{n} rows cannot be split into {k} folds")]
    TooFewRows { n: usize, k: usize },

    #[error("learner received an empty training set")]
    EmptyTrainingSet,
    #[error("design matrix is rank deficient and no ridge penalty was given")]
    SingularDesign,
    #[error("logistic learner requires 0/1 labels, found {0}")]
    NonBinaryLabels(f64),
    #[error("expected {expected} feature columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("level must lie in (0,1), got {0}")]
    InvalidGamma(f64),
    #[error("estimand needs an instrument column")]
    MissingInstrument,
    #[error("fold {fold}: a propensity training split lacks one of the treatment classes")]
    DegenerateTreatmentArm { fold: usize },
    #[error("the IPW initial estimator needs K' >= 2, got {0}")]
    KPrimeTooSmall(usize),
    #[error("instrument effect on treatment {0} is below 0.01")]
    NuTooSmall(f64),
    #[error("fold {fold}: no training rows for nuisance `{task}`")]
    EmptySubsample { fold: usize, task: String },
    #[error("no candidate points for the estimating equation")]
    EmptyPoints,
    #[error("estimating equation has no admissible root: {0}")]
    SolverNoCandidate(String),

    #[error("no rows contribute to the kernel density")]
    NoContributingRows,
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("jacobian is singular (smallest singular value {0:e})")]
    SingularJacobian(f64),
    #[error("arms were estimated on different fold plans")]
    FoldPlanMismatch,
    #[error("arms do not share propensity estimates")]
    PropensityNotShared,

    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("study needs at least one replication")]
    ZeroReps,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl LdmlError {
    /// Stable machine-readable identifier, used in CLI error objects.
    pub fn code(&self) -> &'static str {
        use LdmlError::*;
        match self {
            MissingColumn(_) => "MissingColumn",
            NonBinaryTreatment { .. } => "NonBinaryTreatment",
            NonFiniteValue { .. } => "NonFiniteValue",
            EmptyFile => "EmptyFile",
            Csv(_) => "CsvError",
            Io(_) => "IoError",
            InvalidKPrime { .. } => "InvalidKPrime",
            TooFewRows { .. } => "TooFewRows",
            EmptyTrainingSet => "EmptyTrainingSet",
            SingularDesign => "SingularDesign",
            NonBinaryLabels(_) => "NonBinaryLabels",
            DimensionMismatch { .. } => "DimensionMismatch",
            InvalidGamma(_) => "InvalidGamma",
            MissingInstrument => "MissingInstrument",
            DegenerateTreatmentArm { .. } => "DegenerateTreatmentArm",
            KPrimeTooSmall(_) => "KPrimeTooSmall",
            NuTooSmall(_) => "NuTooSmall",
            EmptySubsample { .. } => "EmptySubsample",
            EmptyPoints => "EmptyPoints",
            SolverNoCandidate(_) => "SolverNoCandidate",
            NoContributingRows => "NoContributingRows",
            NonPositiveBandwidth(_) => "NonPositiveBandwidth",
            SingularJacobian(_) => "SingularJacobian",
            FoldPlanMismatch => "FoldPlanMismatch",
            PropensityNotShared => "PropensityNotShared",
            UnknownMethod(_) => "UnknownMethod",
            ZeroReps => "ZeroReps",
            InvalidConfig(_) => "ConfigError",
        }
    }

    /// Errors after which a single split may be dropped instead of failing the run.
    pub fn is_degenerate_fold(&self) -> bool {
        matches!(
            self,
            LdmlError::EmptySubsample { .. } | LdmlError::DegenerateTreatmentArm { .. }
        )
    }
}
