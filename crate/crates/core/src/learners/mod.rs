//! Supervised learners for the functional nuisances.
//!
//! Every nuisance in the estimators is a conditional expectation of an
//! observable given covariates, so a learner only needs `fit` on a feature
//! matrix and a target vector and `predict` on new rows.

mod gbt;
mod linear;

use std::fmt;
use std::sync::Arc;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{LdmlError, Result};

pub use gbt::{GbtModel, GbtParams};
pub use linear::LinearModel;

pub const DEFAULT_L2_PENALTY: f64 = 1e-4;

/// Probability-type nuisances are clipped to this range unless configured otherwise.
pub const DEFAULT_CLIP: (f64, f64) = (0.01, 0.99);

/// A user-supplied function of one covariate row.
type RowFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct OracleFn(Arc<RowFn>);

impl OracleFn {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn call(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

impl fmt::Debug for OracleFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("OracleFn(..)")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerConfig {
    Logistic {
        #[serde(default = "default_l2")]
        l2_penalty: f64,
    },
    Ridge {
        #[serde(default = "default_l2")]
        l2_penalty: f64,
    },
    Gbt(#[serde(default)] GbtParams),
    Constant,
    /// Ignores the training data and predicts with the wrapped function.
    #[serde(skip)]
    Oracle(OracleFn),
}

fn default_l2() -> f64 {
    DEFAULT_L2_PENALTY
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig::Gbt(GbtParams::default())
    }
}

impl LearnerConfig {
    pub fn logistic() -> Self {
        LearnerConfig::Logistic {
            l2_penalty: DEFAULT_L2_PENALTY,
        }
    }

    pub fn ridge() -> Self {
        LearnerConfig::Ridge {
            l2_penalty: DEFAULT_L2_PENALTY,
        }
    }

    pub fn oracle(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        LearnerConfig::Oracle(OracleFn::new(f))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LdmlError::InvalidConfig(msg.to_owned()));
        match self {
            LearnerConfig::Logistic { l2_penalty } | LearnerConfig::Ridge { l2_penalty }
                if !(*l2_penalty >= 0.0 && l2_penalty.is_finite()) =>
            {
                bad("l2_penalty must be a nonnegative finite number")
            }
            LearnerConfig::Gbt(p) => p.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
enum Model {
    Linear(LinearModel),
    Gbt(GbtModel),
    Constant(f64),
    Oracle(OracleFn),
}

#[derive(Debug, Clone)]
pub struct FittedPredictor {
    model: Model,
    dim: usize,
    clip: Option<(f64, f64)>,
}

/// Fit `config` on `features` (m×p) and `targets` (m).
pub fn fit(
    config: &LearnerConfig,
    features: ArrayView2<'_, f64>,
    targets: &[f64],
    seed: u64,
) -> Result<FittedPredictor> {
    config.validate()?;
    let m = features.nrows();
    if m == 0 || targets.is_empty() {
        return Err(LdmlError::EmptyTrainingSet);
    }
    if targets.len() != m {
        return Err(LdmlError::DimensionMismatch {
            expected: m,
            got: targets.len(),
        });
    }
    if let Some(bad) = targets.iter().find(|v| !v.is_finite()) {
        return Err(LdmlError::NonFiniteValue {
            row: 0,
            column: "target".into(),
            value: bad.to_string(),
        });
    }
    let model = match config {
        LearnerConfig::Logistic { l2_penalty } => {
            if let Some(&y) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(LdmlError::NonBinaryLabels(y));
            }
            Model::Linear(LinearModel::fit_logistic(features, targets, *l2_penalty)?)
        }
        LearnerConfig::Ridge { l2_penalty } => Model::Linear(LinearModel::fit_ridge(features, targets, *l2_penalty)?),
        LearnerConfig::Gbt(params) => Model::Gbt(GbtModel::fit(params, features, targets, seed)),
        LearnerConfig::Constant => Model::Constant(targets.iter().sum::<f64>() / m as f64),
        LearnerConfig::Oracle(f) => Model::Oracle(f.clone()),
    };
    Ok(FittedPredictor {
        model,
        dim: features.ncols(),
        clip: None,
    })
}

impl FittedPredictor {
    pub fn with_clip(mut self, lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "clip range must be ordered");
        self.clip = Some((lo, hi));
        self
    }

    pub fn clip_range(&self) -> Option<(f64, f64)> {
        self.clip
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &'static str {
        match &self.model {
            Model::Linear(m) if m.is_logistic() => "logistic",
            Model::Linear(_) => "ridge",
            Model::Gbt(_) => "gbt",
            Model::Constant(_) => "constant",
            Model::Oracle(_) => "oracle",
        }
    }

    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.dim {
            return Err(LdmlError::DimensionMismatch {
                expected: self.dim,
                got: features.ncols(),
            });
        }
        let mut out: Vec<f64> = match &self.model {
            Model::Linear(m) => features.rows().into_iter().map(|r| m.predict_row(r)).collect(),
            Model::Gbt(m) => features.rows().into_iter().map(|r| m.predict_row(r)).collect(),
            Model::Constant(c) => vec![*c; features.nrows()],
            Model::Oracle(f) => features
                .rows()
                .into_iter()
                .map(|r| match r.as_slice() {
                    Some(s) => f.call(s),
                    None => f.call(&r.to_vec()),
                })
                .collect(),
        };
        if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
            return Err(LdmlError::NonFiniteValue {
                row: 0,
                column: "prediction".into(),
                value: bad.to_string(),
            });
        }
        if let Some((lo, hi)) = self.clip {
            out.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn intercept_only_logistic_returns_base_rate() {
        let x = Array2::<f64>::zeros((4, 0));
        let m = fit(&LearnerConfig::logistic(), x.view(), &[1.0, 0.0, 0.0, 1.0], 0).unwrap();
        let p = m.predict(Array2::<f64>::zeros((3, 0)).view()).unwrap();
        for v in p {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unpenalized_ridge_interpolates_linear_data() {
        let x = array![[1.0], [2.0], [4.0]];
        let cfg = LearnerConfig::Ridge { l2_penalty: 0.0 };
        let m = fit(&cfg, x.view(), &[2.0, 4.0, 8.0], 0).unwrap();
        let p = m.predict(array![[3.0]].view()).unwrap();
        assert!((p[0] - 6.0).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_ridge_without_penalty_is_singular() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let cfg = LearnerConfig::Ridge { l2_penalty: 0.0 };
        let err = fit(&cfg, x.view(), &[1.0, 2.0, 3.0], 0).unwrap_err();
        assert!(matches!(err, LdmlError::SingularDesign));
        assert!(fit(&LearnerConfig::ridge(), x.view(), &[1.0, 2.0, 3.0], 0).is_ok());
    }

    #[test]
    fn gbt_without_trees_predicts_mean() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let cfg = LearnerConfig::Gbt(GbtParams {
            trees: 0,
            ..GbtParams::default()
        });
        let m = fit(&cfg, x.view(), &[1.0, 2.0, 3.0, 6.0], 0).unwrap();
        assert_eq!(m.predict(array![[10.0], [-3.0]].view()).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn constant_and_oracle_predictions() {
        let x = array![[0.0, 5.0], [1.0, 6.0], [2.0, 7.0]];
        let c = fit(&LearnerConfig::Constant, x.view(), &[1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!(c.predict(array![[9.0, 9.0]].view()).unwrap(), vec![2.0]);
        let o = fit(&LearnerConfig::oracle(|x| x[0]), x.view(), &[0.0; 3], 0).unwrap();
        assert_eq!(o.predict(x.view()).unwrap(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn clipping_applies_at_prediction() {
        let x = array![[0.0]];
        let m = fit(&LearnerConfig::oracle(|_| 0.001), x.view(), &[0.0], 0)
            .unwrap()
            .with_clip(0.01, 0.99);
        assert_eq!(m.predict(x.view()).unwrap(), vec![0.01]);
    }

    #[test]
    fn error_paths() {
        let x = Array2::<f64>::zeros((0, 1));
        assert!(matches!(
            fit(&LearnerConfig::Constant, x.view(), &[], 0),
            Err(LdmlError::EmptyTrainingSet)
        ));
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            fit(&LearnerConfig::logistic(), x.view(), &[0.0, 0.5], 0),
            Err(LdmlError::NonBinaryLabels(_))
        ));
        let m = fit(&LearnerConfig::Constant, x.view(), &[0.0, 1.0], 0).unwrap();
        assert!(matches!(
            m.predict(array![[1.0, 2.0]].view()),
            Err(LdmlError::DimensionMismatch { expected: 1, got: 2 })
        ));
    }
}
