//! Synthetic data: twenty uniform covariates, probit treatment, and a
//! two-component Gaussian mixture outcome.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ObservationTable;
use crate::error::{LdmlError, Result};
use crate::inference::normal_cdf;

pub const DGP_DIM: usize = 20;

/// How the second parameter of the outcome noise, `2 X3`, is read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    /// `2 X3` is the variance.
    #[default]
    Variance,
    /// `2 X3` is the standard deviation.
    Sd,
}

impl NoiseConvention {
    pub fn scale(self, x3: f64) -> f64 {
        match self {
            NoiseConvention::Variance => (2.0 * x3).sqrt(),
            NoiseConvention::Sd => 2.0 * x3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub convention: NoiseConvention,
}

/// `P(T=1|X) = Phi(3(1 - X1 - X3))`.
pub fn true_propensity(x: &[f64]) -> f64 {
    normal_cdf(3.0 * (1.0 - x[0] - x[2]))
}

/// Conditional mean of the potential outcome.
pub fn outcome_mean(x: &[f64]) -> f64 {
    f64::from(u8::from(x[0] + x[1] <= 1.0))
}

/// `P(Y(1) <= y | X)`.
pub fn true_conditional_cdf(x: &[f64], y: f64, convention: NoiseConvention) -> f64 {
    let s = convention.scale(x[2]);
    let z = y - outcome_mean(x);
    if s > 0.0 {
        normal_cdf(z / s)
    } else {
        f64::from(u8::from(z >= 0.0))
    }
}

/// One potential outcome `Y(1)` given the first three covariates and a
/// standard normal draw.
pub fn potential_outcome(x1: f64, x2: f64, x3: f64, z: f64, convention: NoiseConvention) -> f64 {
    f64::from(u8::from(x1 + x2 <= 1.0)) + convention.scale(x3) * z
}

fn draw_covariates(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, DGP_DIM), || rng.random::<f64>())
}

/// Observational data: `Y` is generated for every row but only the treated
/// rows carry information for the estimands.
pub fn generate_dgp(config: &DgpConfig) -> Result<ObservationTable> {
    if config.n == 0 {
        return Err(LdmlError::InvalidConfig("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x = draw_covariates(&mut rng, config.n);
    let mut t = Vec::with_capacity(config.n);
    let mut y = Vec::with_capacity(config.n);
    for row in x.rows() {
        let r = row.as_slice().expect("standard layout");
        t.push(rng.random::<f64>() < true_propensity(r));
        let z: f64 = rng.sample(StandardNormal);
        y.push(potential_outcome(r[0], r[1], r[2], z, config.convention));
    }
    ObservationTable::new(x, t, y, None)
}

/// Randomized binary instrument with full compliance (`T = W`), the same
/// covariates and potential outcome as [`generate_dgp`].
pub fn generate_iv_dgp(config: &DgpConfig) -> Result<ObservationTable> {
    if config.n == 0 {
        return Err(LdmlError::InvalidConfig("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x = draw_covariates(&mut rng, config.n);
    let mut w = Vec::with_capacity(config.n);
    let mut y = Vec::with_capacity(config.n);
    for row in x.rows() {
        w.push(rng.random::<bool>());
        let z: f64 = rng.sample(StandardNormal);
        y.push(potential_outcome(row[0], row[1], row[2], z, config.convention));
    }
    ObservationTable::new(x, w.clone(), y, Some(w))
}
