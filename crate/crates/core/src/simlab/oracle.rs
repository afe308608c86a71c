//! Monte Carlo oracle for the marginal quantile of the potential outcome.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LdmlError, Result};
use crate::inference::{gaussian_kernel, silverman_bandwidth};
use crate::par::{derive_seed, map_indices, Execution};

use super::dgp::{potential_outcome, NoiseConvention};

pub const MIN_ORACLE_DRAWS: usize = 1_000_000;
const CHUNK: usize = 1 << 18;

/// Reference value of the `gamma`-quantile of `Y(1)` with its Monte Carlo
/// standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleQuantile {
    pub gamma: f64,
    pub theta: f64,
    pub se: f64,
    pub density: f64,
    pub draws: usize,
}

/// Frozen result of `true_quantile_oracle(2/3, 10^7, seed = 20240607)` under
/// the variance reading; regenerate with `ldml oracle`.
pub const ORACLE_TWO_THIRDS: OracleQuantile = OracleQuantile {
    gamma: 2.0 / 3.0,
    theta: 0.965_354_932_472_779_9,
    se: 3.972_107_920_961_481e-4,
    density: 0.375_294_935_249_146_2,
    draws: 10_000_000,
};

/// Frozen oracle under the standard deviation reading, same seed and draws.
pub const ORACLE_TWO_THIRDS_SD: OracleQuantile = OracleQuantile {
    gamma: 2.0 / 3.0,
    theta: 0.985_628_484_517_888_3,
    se: 2.739_718_342_416_635_7e-4,
    density: 0.544_111_400_767_182_8,
    draws: 10_000_000,
};

pub const ORACLE_SEED: u64 = 20240607;

/// The frozen oracle matching `gamma` and `convention`, if one exists.
pub fn frozen_oracle(gamma: f64, convention: NoiseConvention) -> Option<OracleQuantile> {
    if (gamma - 0.5).abs() < 1e-15 {
        // the mixture is symmetric about one half
        return Some(OracleQuantile {
            gamma,
            theta: 0.5,
            se: 0.0,
            density: f64::NAN,
            draws: 0,
        });
    }
    if (gamma - 2.0 / 3.0).abs() < 1e-12 {
        return Some(match convention {
            NoiseConvention::Variance => ORACLE_TWO_THIRDS,
            NoiseConvention::Sd => ORACLE_TWO_THIRDS_SD,
        });
    }
    None
}

/// Draw `draws` values of `Y(1)`; chunked so the result does not depend on
/// the execution strategy.
pub fn draw_potential_outcomes(draws: usize, seed: u64, convention: NoiseConvention, exec: Execution) -> Vec<f64> {
    let chunks = draws.div_ceil(CHUNK);
    map_indices(exec, chunks, |c| {
        let len = CHUNK.min(draws - c * CHUNK);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
        (0..len)
            .map(|_| {
                let (x1, x2, x3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
                let z: f64 = rng.sample(StandardNormal);
                potential_outcome(x1, x2, x3, z, convention)
            })
            .collect::<Vec<f64>>()
    })
    .concat()
}

/// Empirical `gamma`-quantile (the smallest order statistic whose empirical
/// CDF reaches `gamma`) of simulated `Y(1)`, with standard error
/// `sqrt(gamma(1-gamma)/m) / f(theta)` from a kernel density estimate.
pub fn true_quantile_oracle(
    gamma: f64,
    draws: usize,
    seed: u64,
    convention: NoiseConvention,
    exec: Execution,
) -> Result<OracleQuantile> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(LdmlError::InvalidGamma(gamma));
    }
    if draws < MIN_ORACLE_DRAWS {
        return Err(LdmlError::InvalidConfig(format!(
            "oracle needs at least {MIN_ORACLE_DRAWS} draws, got {draws}"
        )));
    }
    let mut y = draw_potential_outcomes(draws, seed, convention, exec);
    y.sort_unstable_by(f64::total_cmp);
    let idx = ((gamma * draws as f64).ceil() as usize).clamp(1, draws) - 1;
    let theta = y[idx];
    let h = silverman_bandwidth(&y)?;
    // only draws within 8 bandwidths matter to double precision
    let lo = y.partition_point(|&v| v < theta - 8.0 * h);
    let hi = y.partition_point(|&v| v <= theta + 8.0 * h);
    let density = y[lo..hi].iter().map(|&v| gaussian_kernel((v - theta) / h)).sum::<f64>() / (draws as f64 * h);
    let se = (gamma * (1.0 - gamma) / draws as f64).sqrt() / density;
    Ok(OracleQuantile {
        gamma,
        theta,
        se,
        density,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::normal_cdf;

    /// `P(Y(1) <= y)` by Simpson's rule after substituting `x3 = v^2`.
    fn quadrature_cdf(y: f64, convention: NoiseConvention) -> f64 {
        let g = |v: f64| {
            let s = convention.scale(v * v);
            let phi = |z: f64| {
                if s > 0.0 {
                    normal_cdf(z / s)
                } else {
                    f64::from(u8::from(z >= 0.0))
                }
            };
            0.5 * (phi(y - 1.0) + phi(y)) * 2.0 * v
        };
        let m = 4000;
        let h = 1.0 / m as f64;
        let mut s = g(0.0) + g(1.0);
        for i in 1..m {
            s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    fn quadrature_quantile(gamma: f64, convention: NoiseConvention) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if quadrature_cdf(mid, convention) < gamma {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quadrature_is_symmetric_about_one_half() {
        assert!((quadrature_quantile(0.5, NoiseConvention::Variance) - 0.5).abs() < 1e-10);
        let a = quadrature_quantile(0.25, NoiseConvention::Variance);
        let b = quadrature_quantile(0.75, NoiseConvention::Variance);
        assert!((a + b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_constants_agree_with_quadrature() {
        for (o, conv) in [
            (ORACLE_TWO_THIRDS, NoiseConvention::Variance),
            (ORACLE_TWO_THIRDS_SD, NoiseConvention::Sd),
        ] {
            let q = quadrature_quantile(2.0 / 3.0, conv);
            assert!((o.theta - q).abs() < 3.0 * o.se, "{} vs {q} (se {})", o.theta, o.se);
            assert!(o.se > 0.0 && o.se < 1e-3);
        }
    }

    #[test]
    fn two_oracle_seeds_agree() {
        let a = true_quantile_oracle(
            2.0 / 3.0,
            MIN_ORACLE_DRAWS,
            1,
            NoiseConvention::Variance,
            Execution::Parallel,
        )
        .unwrap();
        let b = true_quantile_oracle(
            2.0 / 3.0,
            MIN_ORACLE_DRAWS,
            2,
            NoiseConvention::Variance,
            Execution::Parallel,
        )
        .unwrap();
        let combined = (a.se * a.se + b.se * b.se).sqrt();
        assert!((a.theta - b.theta).abs() < 3.0 * combined);
        let q = quadrature_quantile(2.0 / 3.0, NoiseConvention::Variance);
        assert!((a.theta - q).abs() < 4.0 * a.se);
        // density of the mixture at the quantile, from the same quadrature
        let d = (quadrature_cdf(q + 1e-4, NoiseConvention::Variance)
            - quadrature_cdf(q - 1e-4, NoiseConvention::Variance))
            / 2e-4;
        assert!((a.density - d).abs() < 0.02, "{} vs {d}", a.density);
    }

    #[test]
    fn draws_do_not_depend_on_execution() {
        let a = draw_potential_outcomes(300_000, 5, NoiseConvention::Variance, Execution::Sequential);
        let b = draw_potential_outcomes(300_000, 5, NoiseConvention::Variance, Execution::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_small_runs() {
        assert!(true_quantile_oracle(0.5, 10, 0, NoiseConvention::Variance, Execution::Sequential).is_err());
    }
}
