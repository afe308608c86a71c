//! Localized debiased machine learning (LDML).
//!
//! Cross-fitted estimators for quantiles, quantile treatment effects,
//! quantile+CVaR, expectiles and local quantile treatment effects, whose
//! estimating equations depend on nuisance functions of the target itself.
//! The estimand-dependent nuisance is learned only once, at a rough initial
//! estimate, on data held out from that estimate.

// `!(x >= lo)` style checks are kept so NaN is rejected along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod engine;
pub mod error;
pub mod estimands;
pub mod folds;
pub mod inference;
pub mod learners;
pub mod par;
pub mod simlab;
pub mod solver;

pub use data::{load_csv, load_csv_reader, ColumnSchema, ObservationTable};
pub use engine::{
    run_ldml, run_ldml_effect, Aggregate, EffectReport, EstimateReport, InitialEstimator, LdmlConfig, LearnerSet,
    SplitResult, Variant,
};
pub use error::{LdmlError, Result};
pub use estimands::{
    custom_moment, expectile_moment, ipw_moment, lqte_moment, quantile_cvar_moment, quantile_moment, CustomMoment,
    Estimand, MomentModel,
};
pub use folds::{make_fold_plan, FoldPlan};
pub use learners::{FittedPredictor, LearnerConfig};
pub use par::Execution;
