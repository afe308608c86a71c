//! Jacobians, plug-in variances, confidence intervals, effect differences and
//! the first-stage effect of an instrument on treatment.

use nalgebra::{DMatrix, DVector};
use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::ObservationTable;
use crate::engine::{aggregate_splits, Aggregate, EstimateReport, SplitResult};
use crate::error::{LdmlError, Result};
use crate::estimands::{JacobianRecipe, MomentModel, NuisanceRow, Obs, Vector, MAX_D};
use crate::folds::FoldPlan;
use crate::learners::{self, LearnerConfig};
use crate::par::{derive_seed, map_indices, Execution};

/// Smallest singular value a Jacobian may have before it is inverted.
pub const MIN_SINGULAR_VALUE: f64 = 1e-10;

/// Smallest admissible first-stage effect of the instrument.
pub const MIN_NU: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianEstimate {
    pub matrix: Vec<Vec<f64>>,
    pub method: JacobianRecipe,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bandwidth: Option<f64>,
}

impl JacobianEstimate {
    pub fn scalar(value: f64, method: JacobianRecipe, bandwidth: Option<f64>) -> Self {
        Self {
            matrix: vec![vec![value]],
            method,
            bandwidth,
        }
    }

    pub fn d(&self) -> usize {
        self.matrix.len()
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        let d = self.d();
        DMatrix::from_fn(d, d, |i, j| self.matrix[i][j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub sigma: Vec<Vec<f64>>,
    pub n: usize,
    pub jacobian: JacobianEstimate,
    /// Per-row influence values `J^{-1} psi_i`.
    pub influence: Vec<Vector>,
    pub repaired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub zeta: Vec<f64>,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub(crate) fn gaussian_kernel(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Type-7 sample quantile of sorted data.
pub(crate) fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `0.9 min(sd, IQR/1.34) m^(-1/5)`, falling back to `sd` when the IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let m = values.len();
    if m < 2 {
        return Err(LdmlError::NonPositiveBandwidth(0.0));
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = sorted_quantile(&sorted, 0.75) - sorted_quantile(&sorted, 0.25);
    bandwidth_from_spread(sd, iqr, m)
}

pub(crate) fn bandwidth_from_spread(sd: f64, iqr: f64, m: usize) -> Result<f64> {
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (m as f64).powf(-0.2);
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(LdmlError::NonPositiveBandwidth(h))
    }
}

/// Which rows contribute to a kernel Jacobian and with what weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KdeMode {
    /// `1[T=1] / pi(X)`, optionally self-normalized.
    Treated,
    /// `(W - pi~(X)) / (pi~(X)(1 - pi~(X))) 1[T=1] / nu`, never normalized.
    LqteSigned { nu: f64 },
}

/// Cross-fitted weighted kernel density of the outcome at `theta1`.
///
/// `propensity[i]` is `P(T=1|X_i)` in treated mode and `P(W=1|X_i)` in lqte
/// mode. The bandwidth defaults to [`silverman_bandwidth`] on the outcomes of
/// the contributing rows.
pub fn estimate_jacobian_kde(
    obs: &[Obs],
    propensity: &[f64],
    theta1: f64,
    bandwidth: Option<f64>,
    self_normalize: bool,
    mode: KdeMode,
) -> Result<JacobianEstimate> {
    let n = obs.len() as f64;
    let contributing: Vec<usize> = (0..obs.len()).filter(|&i| obs[i].t).collect();
    if contributing.is_empty() {
        return Err(LdmlError::NoContributingRows);
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(LdmlError::NonPositiveBandwidth(h)),
        None => silverman_bandwidth(&contributing.iter().map(|&i| obs[i].y).collect::<Vec<_>>())?,
    };
    let (value, recipe) = match mode {
        KdeMode::Treated => {
            let (mut num, mut den) = (0.0, 0.0);
            for &i in &contributing {
                let w = 1.0 / propensity[i];
                num += w * gaussian_kernel((obs[i].y - theta1) / h);
                den += w;
            }
            let raw = num / (n * h);
            let value = if self_normalize { raw / (den / n) } else { raw };
            (value, JacobianRecipe::KdeQuantile)
        }
        KdeMode::LqteSigned { nu } => {
            let mut num = 0.0;
            for &i in &contributing {
                let p = propensity[i];
                let w = (f64::from(u8::from(obs[i].w)) - p) / (p * (1.0 - p));
                num += w * gaussian_kernel((obs[i].y - theta1) / h);
            }
            (num / (nu * n * h), JacobianRecipe::KdeLqte)
        }
    };
    Ok(JacobianEstimate::scalar(value, recipe, Some(h)))
}

/// Self-normalized inverse-propensity estimate of `P(Y(1) <= theta1)`.
pub fn ipw_cdf(obs: &[Obs], propensity: &[f64], theta1: f64) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (o, p) in obs.iter().zip(propensity) {
        if o.t {
            num += f64::from(u8::from(o.y <= theta1)) / p;
            den += 1.0 / p;
        }
    }
    if den == 0.0 {
        return Err(LdmlError::NoContributingRows);
    }
    Ok(num / den)
}

pub fn expectile_jacobian(gamma: f64, cdf: f64) -> f64 {
    -gamma - (1.0 - 2.0 * gamma) * cdf
}

pub fn qcvar_block(density: f64) -> Vec<Vec<f64>> {
    vec![vec![density, 0.0], vec![0.0, -1.0]]
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JacobianOptions {
    pub bandwidth: Option<f64>,
    pub self_normalize: bool,
}

/// Jacobian of `model` at `theta` using the model's recipe.
pub fn estimate_jacobian(
    model: &MomentModel,
    obs: &[Obs],
    eta: &[NuisanceRow],
    theta: &[f64],
    opts: JacobianOptions,
) -> Result<JacobianEstimate> {
    let pidx = model.propensity_index();
    let propensity: Vec<f64> = eta.iter().map(|e| e.eta2[pidx]).collect();
    let kde = |mode| estimate_jacobian_kde(obs, &propensity, theta[0], opts.bandwidth, opts.self_normalize, mode);
    match model.jacobian_recipe() {
        JacobianRecipe::KdeQuantile => kde(KdeMode::Treated),
        JacobianRecipe::QcvarBlock => {
            let f = kde(KdeMode::Treated)?;
            Ok(JacobianEstimate {
                matrix: qcvar_block(f.matrix[0][0]),
                method: JacobianRecipe::QcvarBlock,
                bandwidth: f.bandwidth,
            })
        }
        JacobianRecipe::ExpectileCdf => {
            let cdf = ipw_cdf(obs, &propensity, theta[0])?;
            Ok(JacobianEstimate::scalar(
                expectile_jacobian(model.gamma(), cdf),
                JacobianRecipe::ExpectileCdf,
                None,
            ))
        }
        JacobianRecipe::KdeLqte => {
            let nu = eta.first().map_or(1.0, |e| e.nu);
            kde(KdeMode::LqteSigned { nu })
        }
        JacobianRecipe::NumericSmoothed => numeric_jacobian(model, obs, eta, theta, opts.bandwidth),
    }
}

fn numeric_jacobian(
    model: &MomentModel,
    obs: &[Obs],
    eta: &[NuisanceRow],
    theta: &[f64],
    bandwidth: Option<f64>,
) -> Result<JacobianEstimate> {
    let d = model.d();
    let h = match bandwidth {
        Some(h) => h,
        None => {
            let ys: Vec<f64> = obs.iter().filter(|o| o.t).map(|o| o.y).collect();
            if ys.is_empty() {
                return Err(LdmlError::NoContributingRows);
            }
            silverman_bandwidth(&ys)?
        }
    };
    let rows: Vec<usize> = (0..obs.len()).collect();
    let shifted = |delta: f64| {
        let mut t = theta.to_vec();
        t[0] += delta;
        model.mean_psi(obs, eta, &rows, &t)
    };
    let (up, down) = (shifted(h), shifted(-h));
    let mut matrix = vec![vec![0.0; d]; d];
    for (j, row) in matrix.iter_mut().enumerate() {
        row[0] = (up[j] - down[j]) / (2.0 * h);
    }
    if d == 2 {
        matrix[1][1] = -1.0;
    }
    Ok(JacobianEstimate {
        matrix,
        method: JacobianRecipe::NumericSmoothed,
        bandwidth: Some(h),
    })
}

fn invert_checked(j: &JacobianEstimate) -> Result<DMatrix<f64>> {
    let m = j.to_matrix();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LdmlError::SingularJacobian(f64::NAN));
    }
    let smallest = m.clone().svd(false, false).singular_values.min();
    if !(smallest > MIN_SINGULAR_VALUE) {
        return Err(LdmlError::SingularJacobian(smallest));
    }
    m.try_inverse().ok_or(LdmlError::SingularJacobian(smallest))
}

/// Symmetrize and floor negative eigenvalues at zero. Returns whether a
/// repair beyond symmetrization was needed.
fn repair_psd(sigma: &mut DMatrix<f64>) -> bool {
    let sym = (&*sigma + sigma.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        *sigma = sym;
        return false;
    }
    let floored = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.max(0.0)));
    *sigma = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    log::warn!("variance estimate was not positive semidefinite; negative eigenvalues floored at zero");
    true
}

fn mean_outer(rows: &[Vector], d: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(d, d);
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                acc[(a, b)] += r[a] * r[b];
            }
        }
    }
    acc / rows.len().max(1) as f64
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// `Sigma = (1/N) sum_i J^{-1} psi_i psi_i' J^{-T}` over the cross-fitted `psi` rows.
pub fn estimate_variance(psi: &[Vector], jacobian: &JacobianEstimate) -> Result<VarianceEstimate> {
    let d = jacobian.d();
    let inv = invert_checked(jacobian)?;
    let influence: Vec<Vector> = psi
        .iter()
        .map(|p| {
            let mut out = [0.0; MAX_D];
            for (a, o) in out.iter_mut().enumerate().take(d) {
                *o = (0..d).map(|b| inv[(a, b)] * p[b]).sum();
            }
            out
        })
        .collect();
    let mut sigma = mean_outer(&influence, d);
    let repaired = repair_psd(&mut sigma);
    Ok(VarianceEstimate {
        sigma: to_rows(&sigma),
        n: psi.len(),
        jacobian: jacobian.clone(),
        influence,
        repaired,
    })
}

/// `zeta' theta +- z_{1-alpha/2} sqrt(zeta' Sigma zeta / N)`.
pub fn confidence_interval(
    theta: &[f64],
    sigma: &[Vec<f64>],
    n: usize,
    zeta: &[f64],
    alpha: f64,
) -> ConfidenceInterval {
    let center: f64 = zeta.iter().zip(theta).map(|(a, b)| a * b).sum();
    let mut quad = 0.0;
    for (a, za) in zeta.iter().enumerate() {
        for (b, zb) in zeta.iter().enumerate() {
            quad += za * sigma[a][b] * zb;
        }
    }
    let half = normal_quantile(1.0 - alpha / 2.0) * (quad.max(0.0) / n as f64).sqrt();
    ConfidenceInterval {
        zeta: zeta.to_vec(),
        level: 1.0 - alpha,
        lower: center - half,
        upper: center + half,
    }
}

/// Difference `theta^(1) - theta^(0)` of two arms estimated on the same data
/// and fold plans, with variance from the difference of influence rows.
///
/// With `share_propensity`, both arms must have used the same propensity
/// estimates (the control arm sees `1 - pi`).
pub fn effect_difference(
    treated: &EstimateReport,
    control: &EstimateReport,
    share_propensity: bool,
    aggregate: Aggregate,
) -> Result<EstimateReport> {
    if treated.d != control.d || treated.n != control.n {
        return Err(LdmlError::FoldPlanMismatch);
    }
    let d = treated.d;
    let mut splits = Vec::new();
    for s1 in &treated.splits {
        let Some(s0) = control.splits.iter().find(|s| s.split == s1.split) else {
            continue;
        };
        if s1.plan != s0.plan {
            return Err(LdmlError::FoldPlanMismatch);
        }
        if share_propensity
            && (s1.propensity.len() != s0.propensity.len()
                || s1.propensity.iter().zip(&s0.propensity).any(|(a, b)| 1.0 - a != *b))
        {
            return Err(LdmlError::PropensityNotShared);
        }
        let omega: Vec<Vector> = s1
            .influence
            .iter()
            .zip(&s0.influence)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1]])
            .collect();
        let sigma = mean_outer(&omega, d);
        splits.push(SplitResult {
            theta: s1.theta.iter().zip(&s0.theta).map(|(a, b)| a - b).collect(),
            sigma: to_rows(&sigma),
            influence: omega,
            ..s1.clone()
        });
    }
    if splits.is_empty() {
        return Err(LdmlError::FoldPlanMismatch);
    }
    let mut report = aggregate_splits(
        format!("{}_effect", treated.estimand),
        treated.gamma,
        treated.n,
        d,
        splits,
        aggregate,
        treated.ci.alpha,
    );
    report.warnings.extend(treated.warnings.iter().cloned());
    report.warnings.extend(control.warnings.iter().cloned());
    Ok(report)
}

/// One row's contribution to the doubly robust first-stage effect.
pub fn nu_contribution(w: bool, t: bool, pi_w: f64, pi_xw: f64, pi_x1: f64, pi_x0: f64) -> f64 {
    let w = f64::from(u8::from(w));
    let t = f64::from(u8::from(t));
    (w - pi_w) / (pi_w * (1.0 - pi_w)) * (t - pi_xw) + pi_x1 - pi_x0
}

fn with_instrument_column(x: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let col = Array2::from_shape_vec((w.len(), 1), w.to_vec()).expect("column shape");
    concatenate(Axis(1), &[x.view(), col.view()]).expect("row counts match")
}

/// Learners and settings for [`estimate_nu_dml`].
#[derive(Debug, Clone)]
pub struct NuOptions<'a> {
    pub instrument_learner: &'a LearnerConfig,
    pub treatment_learner: &'a LearnerConfig,
    pub clip: (f64, f64),
    pub seed: u64,
    pub execution: Execution,
}

/// Cross-fitted doubly robust estimate of `E[P(T=1|X,W=1) - P(T=1|X,W=0)]`.
pub fn estimate_nu_dml(table: &ObservationTable, plan: &FoldPlan, opts: &NuOptions<'_>) -> Result<f64> {
    let w = table.instrument().ok_or(LdmlError::MissingInstrument)?;
    let wf: Vec<f64> = w.iter().map(|&b| f64::from(u8::from(b))).collect();
    let tf: Vec<f64> = table.treatment().iter().map(|&b| f64::from(u8::from(b))).collect();
    let (lo, hi) = opts.clip;
    let parts = map_indices(opts.execution, plan.k(), |k| -> Result<f64> {
        let train = plan.complement(k);
        let pick = |v: &[f64], rows: &[usize]| rows.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let w_train = pick(&wf, &train);
        if w_train.iter().all(|&v| v == w_train[0]) {
            return Err(LdmlError::DegenerateTreatmentArm { fold: k });
        }
        let x_train = table.select_covariates(&train);
        let pi_w = learners::fit(
            opts.instrument_learner,
            x_train.view(),
            &w_train,
            derive_seed(opts.seed, &[k as u64, 0]),
        )?
        .with_clip(lo, hi);
        let xw_train = with_instrument_column(&x_train, &w_train);
        let pi_t = learners::fit(
            opts.treatment_learner,
            xw_train.view(),
            &pick(&tf, &train),
            derive_seed(opts.seed, &[k as u64, 1]),
        )?
        .with_clip(lo, hi);

        let rows = plan.fold(k);
        let x = table.select_covariates(rows);
        let pw = pi_w.predict(x.view())?;
        let p_obs = pi_t.predict(with_instrument_column(&x, &pick(&wf, rows)).view())?;
        let p1 = pi_t.predict(with_instrument_column(&x, &vec![1.0; rows.len()]).view())?;
        let p0 = pi_t.predict(with_instrument_column(&x, &vec![0.0; rows.len()]).view())?;
        Ok(rows
            .iter()
            .enumerate()
            .map(|(j, &i)| nu_contribution(w[i], table.treatment()[i], pw[j], p_obs[j], p1[j], p0[j]))
            .sum())
    });
    let total: f64 = parts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().sum();
    let nu = total / table.n() as f64;
    if !(nu >= MIN_NU) {
        return Err(LdmlError::NuTooSmall(nu));
    }
    Ok(nu)
}
