//! Discretized DML baseline: the conditional CDF is fitted at every point of
//! a fixed grid of marginal quantiles, and the estimate is the grid point
//! where the doubly robust equation is closest to zero.

use serde::{Deserialize, Serialize};

use crate::data::ObservationTable;
use crate::engine::LearnerSet;
use crate::error::{LdmlError, Result};
use crate::estimands::{quantile_moment, NuisanceRow, Obs, Vector};
use crate::folds::make_fold_plan;
use crate::inference::{estimate_jacobian, estimate_variance, JacobianEstimate, JacobianOptions};
use crate::learners::{self, DEFAULT_CLIP};
use crate::par::{derive_seed, map_indices, Execution};

/// Largest grid size: the j/100 quantiles for j = 1..99.
pub const GRID_POINTS: usize = 99;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DmlDOptions {
    pub k: usize,
    pub learners: LearnerSet,
    pub clip: (f64, f64),
    pub seed: u64,
    pub stratify: bool,
    pub bandwidth: Option<f64>,
    pub self_normalize: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for DmlDOptions {
    fn default() -> Self {
        Self {
            k: 5,
            learners: LearnerSet::default(),
            clip: DEFAULT_CLIP,
            seed: 0,
            stratify: true,
            bandwidth: None,
            self_normalize: true,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlDEstimate {
    pub theta: f64,
    pub stderr: f64,
    pub sigma: f64,
    pub grid: Vec<f64>,
    pub index: usize,
    /// `|mean psi|` at every grid point.
    pub residuals: Vec<f64>,
    pub jacobian: JacobianEstimate,
    #[serde(skip)]
    pub influence: Vec<f64>,
}

/// Distinct j/100 empirical quantiles (inverse-CDF definition) of `values`.
pub fn quantile_grid(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let mut grid: Vec<f64> = (1..=GRID_POINTS)
        .filter_map(|j| {
            let idx = (j * m).div_ceil(100).checked_sub(1)?;
            sorted.get(idx).copied()
        })
        .collect();
    grid.dedup();
    grid
}

/// Mean of the doubly robust quantile moment at `theta` given per-row `eta1`
/// (conditional CDF at `theta`) and propensity.
fn mean_psi_at(obs: &[Obs], eta1: impl Fn(usize) -> f64, pi: &[f64], theta: f64, gamma: f64) -> f64 {
    let s: f64 = obs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let e = eta1(i);
            let resid = if o.t {
                (f64::from(u8::from(o.y <= theta)) - e) / pi[i]
            } else {
                0.0
            };
            resid + e - gamma
        })
        .sum();
    s / obs.len() as f64
}

/// Exhaustive scan of the grid: the first index minimizing `|mean psi|`,
/// with all magnitudes. `eta1[j][i]` is the CDF at `grid[j]` for row `i`.
pub fn solve_on_grid(obs: &[Obs], grid: &[f64], eta1: &[Vec<f64>], pi: &[f64], gamma: f64) -> (usize, Vec<f64>) {
    let residuals: Vec<f64> = grid
        .iter()
        .zip(eta1)
        .map(|(&g, e)| mean_psi_at(obs, |i| e[i], pi, g, gamma).abs())
        .collect();
    let index = residuals
        .iter()
        .enumerate()
        .fold(0, |best, (j, &r)| if r < residuals[best] { j } else { best });
    (index, residuals)
}

/// Cross-fitted DML over the discretized parameter range.
pub fn baseline_dml_d(table: &ObservationTable, gamma: f64, opts: &DmlDOptions) -> Result<DmlDEstimate> {
    let model = quantile_moment(gamma)?;
    // K' = 1 keeps the fold machinery's K >= 3 guard without an inner split
    let obs = Obs::rows(table);
    let t = table.treatment();
    let plan = make_fold_plan(
        table.n(),
        opts.k,
        1,
        derive_seed(opts.seed, &[0]),
        opts.stratify.then_some(t),
    )?;
    let treated_y: Vec<f64> = obs.iter().filter(|o| o.t).map(|o| o.y).collect();
    if treated_y.is_empty() {
        return Err(LdmlError::EmptyPoints);
    }
    let grid = quantile_grid(&treated_y);
    let (lo, hi) = opts.clip;

    let per_fold = map_indices(opts.execution, plan.k(), |k| -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let train = plan.complement(k);
        let eval = plan.fold(k);
        let x_eval = table.select_covariates(eval);
        let labels: Vec<f64> = train.iter().map(|&i| f64::from(u8::from(t[i]))).collect();
        if labels.iter().all(|&v| v == labels[0]) {
            return Err(LdmlError::DegenerateTreatmentArm { fold: k });
        }
        let x_train = table.select_covariates(&train);
        let pi = learners::fit(
            &opts.learners.propensity,
            x_train.view(),
            &labels,
            derive_seed(opts.seed, &[1, k as u64]),
        )?
        .with_clip(lo, hi)
        .predict(x_eval.view())?;
        let treated: Vec<usize> = train.iter().copied().filter(|&i| t[i]).collect();
        if treated.is_empty() {
            return Err(LdmlError::EmptySubsample {
                fold: k,
                task: "cdf".into(),
            });
        }
        let x_treated = table.select_covariates(&treated);
        let cdf = map_indices(opts.execution, grid.len(), |j| {
            let g = grid[j];
            let y: Vec<f64> = treated.iter().map(|&i| f64::from(u8::from(obs[i].y <= g))).collect();
            let seed = derive_seed(opts.seed, &[2, k as u64, j as u64]);
            learners::fit(&opts.learners.localized, x_treated.view(), &y, seed)?
                .with_clip(lo, hi)
                .predict(x_eval.view())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok((pi, cdf))
    });

    let n = table.n();
    let mut pi = vec![0.0; n];
    // eta1[j][i]
    let mut eta1 = vec![vec![0.0; n]; grid.len()];
    for (k, fold) in per_fold.into_iter().enumerate() {
        let (p, cdf) = fold?;
        for (r, &i) in plan.fold(k).iter().enumerate() {
            pi[i] = p[r];
            for (j, col) in cdf.iter().enumerate() {
                eta1[j][i] = col[r];
            }
        }
    }
    let (index, residuals) = solve_on_grid(&obs, &grid, &eta1, &pi, gamma);
    let theta = grid[index];

    let eta: Vec<NuisanceRow> = (0..n)
        .map(|i| NuisanceRow {
            eta1: [eta1[index][i], 0.0],
            eta2: [pi[i], 0.0],
            nu: 1.0,
        })
        .collect();
    let jacobian = estimate_jacobian(
        &model,
        &obs,
        &eta,
        &[theta],
        JacobianOptions {
            bandwidth: opts.bandwidth,
            self_normalize: opts.self_normalize,
        },
    )?;
    let psi: Vec<Vector> = obs.iter().zip(&eta).map(|(o, e)| model.psi(o, &[theta], e)).collect();
    let var = estimate_variance(&psi, &jacobian)?;
    let sigma = var.sigma[0][0];
    Ok(DmlDEstimate {
        theta,
        stderr: (sigma / n as f64).sqrt(),
        sigma,
        grid,
        index,
        residuals,
        jacobian,
        influence: var.influence.iter().map(|v| v[0]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::dgp::{generate_dgp, true_conditional_cdf, true_propensity, DgpConfig, NoiseConvention};

    #[test]
    fn grid_is_inverse_cdf_quantiles() {
        let v: Vec<f64> = (1..=200).map(f64::from).collect();
        let g = quantile_grid(&v);
        assert_eq!(g.len(), 99);
        assert_eq!(g[0], 2.0);
        assert_eq!(g[49], 100.0);
        assert_eq!(g[98], 198.0);
        let g = quantile_grid(&[3.0, 3.0, 3.0, 7.0]);
        assert_eq!(g, vec![3.0, 7.0]);
    }

    #[test]
    fn two_folds_are_rejected() {
        let table = generate_dgp(&DgpConfig {
            n: 200,
            seed: 0,
            convention: NoiseConvention::Variance,
        })
        .unwrap();
        let opts = DmlDOptions {
            k: 2,
            ..Default::default()
        };
        assert!(matches!(
            baseline_dml_d(&table, 0.5, &opts),
            Err(LdmlError::InvalidKPrime { .. })
        ));
    }

    #[test]
    fn oracle_nuisances_pick_the_grid_point_nearest_the_root() {
        let conv = NoiseConvention::Variance;
        let table = generate_dgp(&DgpConfig {
            n: 600,
            seed: 11,
            convention: conv,
        })
        .unwrap();
        let gamma = 2.0 / 3.0;
        let obs = Obs::rows(&table);
        let rows: Vec<Vec<f64>> = table.covariates().rows().into_iter().map(|r| r.to_vec()).collect();
        let pi: Vec<f64> = rows.iter().map(|x| true_propensity(x)).collect();
        let ys: Vec<f64> = obs.iter().filter(|o| o.t).map(|o| o.y).collect();
        let grid = quantile_grid(&ys);
        let eta1: Vec<Vec<f64>> = grid
            .iter()
            .map(|&g| rows.iter().map(|x| true_conditional_cdf(x, g, conv)).collect())
            .collect();
        let (index, residuals) = solve_on_grid(&obs, &grid, &eta1, &pi, gamma);

        let signed: Vec<f64> = grid
            .iter()
            .zip(&eta1)
            .map(|(&g, e)| {
                let s: f64 = obs
                    .iter()
                    .enumerate()
                    .map(|(i, o)| {
                        let hit = f64::from(u8::from(o.t && o.y <= g));
                        let t = f64::from(u8::from(o.t));
                        hit / pi[i] - t * e[i] / pi[i] + e[i] - gamma
                    })
                    .sum();
                s / obs.len() as f64
            })
            .collect();
        for (r, s) in residuals.iter().zip(&signed) {
            assert!((r - s.abs()).abs() < 1e-12);
        }
        let brute = (0..grid.len())
            .min_by(|&a, &b| signed[a].abs().total_cmp(&signed[b].abs()))
            .unwrap();
        assert_eq!(index, brute);
        // the root lies between the last negative and first nonnegative value
        let j = signed.iter().position(|&v| v >= 0.0).unwrap();
        assert!(index == j || index + 1 == j);
    }
}
