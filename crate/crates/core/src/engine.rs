//! The LDML meta-algorithm.
//!
//! For every repetition of the random fold split:
//!
//! 1. build a three-way [`FoldPlan`];
//! 2. for each fold `k`, compute a rough initial estimate from the folds in
//!    `h1(k)` only;
//! 3. fit the target-dependent nuisances at that initial estimate on the folds
//!    in `h2(k)`, and the target-free nuisances on `h1(k) + h2(k)`;
//! 4. solve the cross-fitted equation (pooled over folds, or per fold and
//!    averaged) and estimate its variance.
//!
//! Repetitions are aggregated by median or mean.

use serde::{Deserialize, Serialize};

use crate::data::ObservationTable;
use crate::error::{LdmlError, Result};
use crate::estimands::{
    ipw_moment, Dest, Estimand, LearnerSlot, MomentModel, NuisanceRow, NuisanceTask, Obs, Target, Vector,
};
use crate::folds::{make_fold_plan, FoldPlan};
use crate::inference::{
    confidence_interval, estimate_jacobian, estimate_nu_dml, estimate_variance, JacobianEstimate, JacobianOptions,
    NuOptions,
};
use crate::learners::{self, FittedPredictor, LearnerConfig, DEFAULT_CLIP};
use crate::par::{derive_seed, map_indices, Execution};
use crate::solver::{solve_piecewise_linear, solve_scan_bisect, solve_step_equation, StepSolution};

/// Slack for comparing a directly evaluated residual with the solver's grid
/// residual, which is accumulated in a different order.
const RESIDUAL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Solve within each fold and average the solutions.
    Ldml1,
    /// Solve the grand-average equation pooled over folds.
    #[default]
    Ldml2,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Median,
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialEstimator {
    /// Cross-fitted IPW, or the weighting estimator for lqte.
    #[default]
    Auto,
    Ipw,
    LqteWeighting,
    /// Use this value in every fold.
    Fixed(f64),
}

/// Learner configuration per nuisance slot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerSet {
    pub propensity: LearnerConfig,
    pub localized: LearnerConfig,
    pub outcome: LearnerConfig,
    pub compliance: LearnerConfig,
}

impl LearnerSet {
    pub fn uniform(config: LearnerConfig) -> Self {
        Self {
            propensity: config.clone(),
            localized: config.clone(),
            outcome: config.clone(),
            compliance: config,
        }
    }

    pub fn get(&self, slot: LearnerSlot) -> &LearnerConfig {
        match slot {
            LearnerSlot::Propensity => &self.propensity,
            LearnerSlot::Localized => &self.localized,
            LearnerSlot::Outcome => &self.outcome,
            LearnerSlot::Compliance => &self.compliance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in [&self.propensity, &self.localized, &self.outcome, &self.compliance] {
            l.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LdmlConfig {
    pub k: usize,
    pub k_prime: usize,
    pub variant: Variant,
    pub splits: usize,
    pub aggregate: Aggregate,
    pub epsilon_tolerance: f64,
    pub learners: LearnerSet,
    pub seed: u64,
    /// Balance treated (or instrument) shares across folds.
    pub stratify: bool,
    /// Rescale propensities per fold so the inverse weights average to one.
    pub normalize_weights: bool,
    pub clip: (f64, f64),
    pub alpha: f64,
    /// Kernel bandwidth; `None` uses the rule of thumb.
    pub bandwidth: Option<f64>,
    pub self_normalize: bool,
    pub initial: InitialEstimator,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for LdmlConfig {
    fn default() -> Self {
        Self {
            k: 5,
            k_prime: 2,
            variant: Variant::Ldml2,
            splits: 3,
            aggregate: Aggregate::Median,
            epsilon_tolerance: 0.0,
            learners: LearnerSet::default(),
            seed: 0,
            stratify: true,
            normalize_weights: false,
            clip: DEFAULT_CLIP,
            alpha: 0.05,
            bandwidth: None,
            self_normalize: true,
            initial: InitialEstimator::Auto,
            execution: Execution::default(),
        }
    }
}

impl LdmlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LdmlError::InvalidConfig(m));
        if self.k < 3 || self.k_prime < 1 || self.k_prime + 2 > self.k {
            return Err(LdmlError::InvalidKPrime {
                k: self.k,
                k_prime: self.k_prime,
            });
        }
        if self.splits == 0 {
            return bad("splits must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        let (lo, hi) = self.clip;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("clip range must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})"));
        }
        if !(self.epsilon_tolerance >= 0.0) {
            return bad("epsilon_tolerance must be nonnegative".into());
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(LdmlError::NonPositiveBandwidth(h));
            }
        }
        self.learners.validate()
    }
}

/// Training rows behind each fold's nuisances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldProvenance {
    pub fold: usize,
    /// Rows the initial estimate was computed from.
    pub initial_rows: Vec<usize>,
    /// Training rows of each target-dependent task, after filtering.
    pub dependent_rows: Vec<Vec<usize>>,
    /// Training rows of each target-free task, after filtering.
    pub independent_rows: Vec<Vec<usize>>,
}

/// Everything fitted for one fold plan.
#[derive(Debug, Clone)]
pub struct CrossFitState {
    pub plan: FoldPlan,
    pub tasks: Vec<NuisanceTask>,
    pub theta_init: Vec<Option<f64>>,
    /// `models[k][j]` predicts task `j` on fold `k`; `None` when shared.
    pub models: Vec<Vec<Option<FittedPredictor>>>,
    pub provenance: Vec<FoldProvenance>,
    pub nu: Option<f64>,
    /// Cross-fitted nuisance values for every row.
    pub values: Vec<NuisanceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub size: usize,
    pub theta_init: Option<f64>,
    pub dependent_train_sizes: Vec<usize>,
    pub independent_train_sizes: Vec<usize>,
    /// Per-fold solution under the per-fold variant.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub theta_fold: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    pub fold_seed: u64,
    pub theta: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub jacobian: JacobianEstimate,
    /// `||mean psi(theta)||` at the solution.
    pub residual: f64,
    /// Smallest residual over the candidate grid.
    pub grid_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nu: Option<f64>,
    pub folds: Vec<FoldDiagnostics>,
    #[serde(skip)]
    pub plan: Option<FoldPlan>,
    #[serde(skip)]
    pub influence: Vec<Vector>,
    #[serde(skip)]
    pub propensity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardedSplit {
    pub split: usize,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: String,
    pub gamma: f64,
    pub n: usize,
    pub d: usize,
    pub theta: Vec<f64>,
    pub jacobian: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub stderr: Vec<f64>,
    pub ci: IntervalSet,
    pub splits: Vec<SplitResult>,
    pub discarded: Vec<DiscardedSplit>,
    pub warnings: Vec<String>,
}

fn both_classes(flags: impl Iterator<Item = bool>) -> bool {
    let (mut seen_true, mut seen_false) = (false, false);
    for f in flags {
        seen_true |= f;
        seen_false |= !f;
        if seen_true && seen_false {
            return true;
        }
    }
    false
}

/// Solution of an averaged equation over `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Solved {
    pub theta: Vec<f64>,
    pub grid_residual: f64,
}

/// Solve `mean_{i in rows} psi(Z_i; theta, eta_i) = 0` for `model`.
pub fn solve_moment(model: &MomentModel, obs: &[Obs], eta: &[NuisanceRow], rows: &[usize]) -> Result<Solved> {
    if rows.is_empty() {
        return Err(LdmlError::EmptyPoints);
    }
    let m = rows.len() as f64;
    let g = model.gamma();
    let ipw = model.is_ipw();
    let treated = || rows.iter().copied().filter(|&i| obs[i].t);
    let step = |sol: StepSolution| (sol.theta, sol.residual);
    let (theta1, grid_residual) = match model.estimand() {
        Estimand::Quantile | Estimand::QuantileCvar => {
            let mut offset = 0.0;
            let mut points = Vec::new();
            for &i in rows {
                let (o, e) = (&obs[i], &eta[i]);
                let pi = e.eta2[0];
                if o.t {
                    points.push((o.y, 1.0 / (m * pi)));
                }
                offset += if ipw {
                    -g
                } else {
                    let resid = if o.t { e.eta1[0] / pi } else { 0.0 };
                    e.eta1[0] - g - resid
                };
            }
            step(solve_step_equation(&points, offset / m, true)?)
        }
        Estimand::Lqte => {
            let mut offset = 0.0;
            let mut points = Vec::new();
            for &i in rows {
                let (o, e) = (&obs[i], &eta[i]);
                let (e11, e12) = if ipw { (0.0, 0.0) } else { (e.eta1[0], e.eta1[1]) };
                let pw = e.eta2[0];
                let branch = if o.w { 1.0 / pw } else { -1.0 / (1.0 - pw) };
                if o.t {
                    points.push((o.y, branch / (m * e.nu)));
                }
                let base = if o.w { -e11 / pw } else { e12 / (1.0 - pw) };
                offset += (e11 - e12 + base) / e.nu - g;
            }
            step(solve_step_equation(&points, offset / m, false)?)
        }
        Estimand::Expectile => {
            let (mut c0, mut c1) = (0.0, 0.0);
            let mut kinks = Vec::new();
            for &i in rows {
                let (o, e) = (&obs[i], &eta[i]);
                let a = if o.t { 1.0 / e.eta2[1] } else { 0.0 };
                if ipw {
                    if o.t {
                        c0 += a * (1.0 - g) * o.y;
                        c1 -= a * (1.0 - g);
                    }
                } else {
                    let (e1, e21) = (e.eta1[0], e.eta2[0]);
                    if o.t {
                        c0 += a * ((1.0 - g) * (o.y - e21) + (1.0 - 2.0 * g) * e1);
                    }
                    c0 += (1.0 - g) * e21 - (1.0 - 2.0 * g) * e1;
                    c1 -= 1.0 - g;
                }
                if o.t {
                    kinks.push((o.y, -(1.0 - 2.0 * g) * a / m));
                }
            }
            (solve_piecewise_linear(&kinks, c0 / m, c1 / m)?, 0.0)
        }
        Estimand::Custom(_) => {
            let cands: Vec<f64> = treated().map(|i| obs[i].y).collect();
            let f = |t: f64| model.mean_psi(obs, eta, rows, &[t, 0.0])[0];
            step(solve_scan_bisect(f, &cands)?)
        }
    };
    let mut theta = vec![theta1];
    if model.d() == 2 {
        // the second component is `(...) - theta2`
        theta.push(model.mean_psi(obs, eta, rows, &[theta1, 0.0])[1]);
    }
    Ok(Solved { theta, grid_residual })
}

fn residual_norm(model: &MomentModel, obs: &[Obs], eta: &[NuisanceRow], rows: &[usize], theta: &[f64]) -> f64 {
    let r = model.mean_psi(obs, eta, rows, theta);
    r[..model.d()].iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Shared inputs for fitting one fold plan.
#[derive(Debug, Clone)]
pub struct FitContext<'a> {
    pub table: &'a ObservationTable,
    pub obs: &'a [Obs],
    pub model: &'a MomentModel,
    pub config: &'a LdmlConfig,
    pub seed: u64,
}

impl FitContext<'_> {
    fn flags(&self, target: Target) -> Vec<bool> {
        match target {
            Target::Instrument => self.obs.iter().map(|o| o.w).collect(),
            _ => self.obs.iter().map(|o| o.t).collect(),
        }
    }
}

fn fit_predict(
    ctx: &FitContext<'_>,
    learner: &LearnerConfig,
    train: &[usize],
    labels: &[f64],
    predict_rows: &[usize],
    probability: bool,
    seed: u64,
) -> Result<(FittedPredictor, Vec<f64>)> {
    let x = ctx.table.select_covariates(train);
    let mut model = learners::fit(learner, x.view(), labels, seed)?;
    if probability {
        model = model.with_clip(ctx.config.clip.0, ctx.config.clip.1);
    }
    let preds = model.predict(ctx.table.select_covariates(predict_rows).view())?;
    Ok((model, preds))
}

/// Cross-fitted IPW initial estimate for fold `k`.
///
/// For each `l` in `h1(k)`, a propensity is fitted on the other folds of
/// `h1(k)` and evaluated on fold `l`; the pooled IPW equation over `h1(k)` is
/// then solved for `theta1`. For lqte this is the weighting equation, which
/// also needs `nu`.
pub fn fit_initial_ipw(ctx: &FitContext<'_>, plan: &FoldPlan, k: usize, nu: Option<f64>) -> Result<f64> {
    if plan.k_prime() < 2 {
        return Err(LdmlError::KPrimeTooSmall(plan.k_prime()));
    }
    let ipw = ipw_moment(ctx.model);
    let task = ipw
        .tasks()
        .into_iter()
        .next()
        .expect("ipw moment has a propensity task");
    let flags = ctx.flags(task.target);
    let h1 = plan.h1(k);
    let mut eta = vec![NuisanceRow::default(); ctx.obs.len()];
    let mut rows = Vec::new();
    for &l in h1 {
        let inner: Vec<usize> = h1.iter().copied().filter(|&j| j != l).collect();
        let train = plan.rows_of(&inner);
        if !both_classes(train.iter().map(|&i| flags[i])) {
            return Err(LdmlError::DegenerateTreatmentArm { fold: k });
        }
        let labels: Vec<f64> = train.iter().map(|&i| f64::from(u8::from(flags[i]))).collect();
        let seed = derive_seed(ctx.seed, &[2, k as u64, l as u64]);
        let eval = plan.fold(l);
        let learner = ctx.config.learners.get(task.slot);
        let (_, preds) = fit_predict(ctx, learner, &train, &labels, eval, true, seed)?;
        for (&i, p) in eval.iter().zip(preds) {
            if let Dest::Eta2(j) = task.dest {
                eta[i].eta2[j] = p;
            }
            eta[i].nu = nu.unwrap_or(1.0);
        }
        rows.extend_from_slice(eval);
    }
    Ok(solve_moment(&ipw, ctx.obs, &eta, &rows)?.theta[0])
}

/// Weighting initial estimate for lqte: the lqte equation with its localized
/// nuisances set to zero, cross-fitted like [`fit_initial_ipw`].
pub fn fit_initial_lqte_weighting(ctx: &FitContext<'_>, plan: &FoldPlan, k: usize, nu: f64) -> Result<f64> {
    if !matches!(ctx.model.estimand(), Estimand::Lqte) {
        return Err(LdmlError::InvalidConfig(
            "weighting initial estimate is specific to lqte".into(),
        ));
    }
    if ctx.table.instrument().is_none() {
        return Err(LdmlError::MissingInstrument);
    }
    if !(nu >= crate::inference::MIN_NU) {
        return Err(LdmlError::NuTooSmall(nu));
    }
    fit_initial_ipw(ctx, plan, k, Some(nu))
}

/// Options for [`fit_localized_nuisances`] beyond the context.
#[derive(Debug, Clone, Default)]
pub struct NuisanceOptions<'a> {
    pub nu: Option<f64>,
    /// Cross-fitted propensity values to use instead of fitting one.
    pub shared_propensity: Option<&'a [f64]>,
}

/// Fit every nuisance task for every fold of `plan`.
pub fn fit_localized_nuisances(
    ctx: &FitContext<'_>,
    plan: &FoldPlan,
    theta_init: &[Option<f64>],
    opts: &NuisanceOptions<'_>,
) -> Result<CrossFitState> {
    let tasks = ctx.model.tasks();
    let custom = ctx.model.custom();
    let per_fold = map_indices(ctx.config.execution, plan.k(), |k| {
        let c1 = plan.rows_of(plan.h1(k));
        let c2 = plan.rows_of(plan.h2(k));
        let c12 = plan.complement(k);
        let eval = plan.fold(k);
        let mut models = Vec::with_capacity(tasks.len());
        let mut preds = Vec::with_capacity(tasks.len());
        let mut prov = FoldProvenance {
            fold: k,
            initial_rows: if theta_init[k].is_some() {
                c1.clone()
            } else {
                Vec::new()
            },
            dependent_rows: Vec::new(),
            independent_rows: Vec::new(),
        };
        for (j, task) in tasks.iter().enumerate() {
            if matches!(task.target, Target::Treatment | Target::Instrument) {
                if let Some(shared) = opts.shared_propensity {
                    models.push(None);
                    preds.push(eval.iter().map(|&i| shared[i]).collect::<Vec<f64>>());
                    prov.independent_rows.push(Vec::new());
                    continue;
                }
            }
            let base = if task.dependent { &c2 } else { &c12 };
            let train: Vec<usize> = base.iter().copied().filter(|&i| task.keeps(&ctx.obs[i])).collect();
            if train.is_empty() {
                return Err(LdmlError::EmptySubsample {
                    fold: k,
                    task: task.name.to_owned(),
                });
            }
            if matches!(task.target, Target::Treatment | Target::Instrument) {
                let flags = ctx.flags(task.target);
                if !both_classes(train.iter().map(|&i| flags[i])) {
                    return Err(LdmlError::DegenerateTreatmentArm { fold: k });
                }
            }
            let theta1 = if task.dependent {
                theta_init[k].expect("dependent task needs an initial estimate")
            } else {
                0.0
            };
            let labels: Vec<f64> = train.iter().map(|&i| task.label(&ctx.obs[i], theta1, custom)).collect();
            let seed = derive_seed(ctx.seed, &[1, k as u64, j as u64]);
            let learner = ctx.config.learners.get(task.slot);
            let (model, p) = fit_predict(ctx, learner, &train, &labels, eval, task.probability, seed)?;
            models.push(Some(model));
            preds.push(p);
            if task.dependent {
                prov.dependent_rows.push(train);
            } else {
                prov.independent_rows.push(train);
            }
        }
        Ok((models, preds, prov))
    });

    let mut values = vec![NuisanceRow::default(); ctx.obs.len()];
    let mut models = Vec::with_capacity(plan.k());
    let mut provenance = Vec::with_capacity(plan.k());
    for (k, fold) in per_fold.into_iter().enumerate() {
        let (m, preds, prov) = fold?;
        for (task, p) in tasks.iter().zip(&preds) {
            for (&i, &v) in plan.fold(k).iter().zip(p) {
                match task.dest {
                    Dest::Eta1(j) => values[i].eta1[j] = v,
                    Dest::Eta2(j) => values[i].eta2[j] = v,
                }
            }
        }
        models.push(m);
        provenance.push(prov);
    }
    for v in &mut values {
        v.nu = opts.nu.unwrap_or(1.0);
    }
    if ctx.config.normalize_weights
        && opts.shared_propensity.is_none()
        && tasks.iter().any(|t| t.target == Target::Treatment)
    {
        let pidx = ctx.model.propensity_index();
        for k in 0..plan.k() {
            let rows = plan.fold(k);
            let mean_w: f64 = rows
                .iter()
                .filter(|&&i| ctx.obs[i].t)
                .map(|&i| 1.0 / values[i].eta2[pidx])
                .sum::<f64>()
                / rows.len() as f64;
            if mean_w > 0.0 {
                for &i in rows {
                    values[i].eta2[pidx] *= mean_w;
                }
            }
        }
    }
    Ok(CrossFitState {
        plan: plan.clone(),
        tasks,
        theta_init: theta_init.to_vec(),
        models,
        provenance,
        nu: opts.nu,
        values,
    })
}

fn initial_estimates(ctx: &FitContext<'_>, plan: &FoldPlan, nu: Option<f64>) -> Result<Vec<Option<f64>>> {
    if !ctx.model.tasks().iter().any(|t| t.dependent) {
        return Ok(vec![None; plan.k()]);
    }
    let lqte = matches!(ctx.model.estimand(), Estimand::Lqte);
    let results = map_indices(ctx.config.execution, plan.k(), |k| match ctx.config.initial {
        InitialEstimator::Fixed(v) => Ok(Some(v)),
        InitialEstimator::LqteWeighting => fit_initial_lqte_weighting(ctx, plan, k, nu.unwrap_or(f64::NAN)).map(Some),
        InitialEstimator::Auto if lqte => fit_initial_lqte_weighting(ctx, plan, k, nu.unwrap_or(f64::NAN)).map(Some),
        InitialEstimator::Auto | InitialEstimator::Ipw => fit_initial_ipw(ctx, plan, k, nu).map(Some),
    });
    results.into_iter().collect()
}

fn stratify_flags(model: &MomentModel, obs: &[Obs]) -> Vec<bool> {
    if model.needs_instrument() {
        obs.iter().map(|o| o.w).collect()
    } else {
        obs.iter().map(|o| o.t).collect()
    }
}

/// Inputs for one repetition of the fold split.
#[derive(Debug, Clone, Default)]
pub struct SplitOptions<'a> {
    /// Use this plan instead of drawing one.
    pub plan: Option<FoldPlan>,
    pub shared_propensity: Option<&'a [f64]>,
}

/// Run one full repetition: plan, initial estimates, nuisances, solve, variance.
pub fn run_split(
    table: &ObservationTable,
    obs: &[Obs],
    model: &MomentModel,
    config: &LdmlConfig,
    split: usize,
    opts: &SplitOptions<'_>,
) -> Result<(SplitResult, CrossFitState)> {
    let split_seed = derive_seed(config.seed, &[split as u64]);
    let fold_seed = derive_seed(split_seed, &[0]);
    let plan = match &opts.plan {
        Some(p) => p.clone(),
        None => {
            let flags = config.stratify.then(|| stratify_flags(model, obs));
            make_fold_plan(table.n(), config.k, config.k_prime, fold_seed, flags.as_deref())?
        }
    };
    let ctx = FitContext {
        table,
        obs,
        model,
        config,
        seed: split_seed,
    };
    let nu = if model.needs_instrument() {
        let nu_opts = NuOptions {
            instrument_learner: &config.learners.propensity,
            treatment_learner: &config.learners.compliance,
            clip: config.clip,
            seed: derive_seed(split_seed, &[3]),
            execution: config.execution,
        };
        Some(estimate_nu_dml(table, &plan, &nu_opts)?)
    } else {
        None
    };
    let theta_init = initial_estimates(&ctx, &plan, nu)?;
    let state = fit_localized_nuisances(
        &ctx,
        &plan,
        &theta_init,
        &NuisanceOptions {
            nu,
            shared_propensity: opts.shared_propensity,
        },
    )?;
    let eta = &state.values;
    let all: Vec<usize> = (0..obs.len()).collect();
    let mut fold_thetas: Vec<Option<Vec<f64>>> = vec![None; plan.k()];
    let (theta, grid_residual, residual) = match config.variant {
        Variant::Ldml2 => {
            let sol = solve_moment(model, obs, eta, &all)?;
            let r = residual_norm(model, obs, eta, &all, &sol.theta);
            check_residual(r, sol.grid_residual, config.epsilon_tolerance)?;
            (sol.theta, sol.grid_residual, r)
        }
        Variant::Ldml1 => {
            let d = model.d();
            let mut mean = vec![0.0; d];
            let mut worst_grid: f64 = 0.0;
            for (k, slot) in fold_thetas.iter_mut().enumerate() {
                let rows = plan.fold(k);
                let sol = solve_moment(model, obs, eta, rows)?;
                let r = residual_norm(model, obs, eta, rows, &sol.theta);
                check_residual(r, sol.grid_residual, config.epsilon_tolerance)?;
                worst_grid = worst_grid.max(sol.grid_residual);
                for (m, t) in mean.iter_mut().zip(&sol.theta) {
                    *m += t / plan.k() as f64;
                }
                *slot = Some(sol.theta);
            }
            let r = residual_norm(model, obs, eta, &all, &mean);
            (mean, worst_grid, r)
        }
    };

    let jacobian = estimate_jacobian(
        model,
        obs,
        eta,
        &theta,
        JacobianOptions {
            bandwidth: config.bandwidth,
            self_normalize: config.self_normalize,
        },
    )?;
    let psi: Vec<Vector> = (0..obs.len()).map(|i| model.psi(&obs[i], &theta, &eta[i])).collect();
    let var = estimate_variance(&psi, &jacobian)?;
    if var.repaired {
        log::warn!("split {split}: variance repaired to be positive semidefinite");
    }
    let pidx = model.propensity_index();
    let folds = (0..plan.k())
        .map(|k| FoldDiagnostics {
            fold: k,
            size: plan.fold(k).len(),
            theta_init: theta_init[k],
            dependent_train_sizes: state.provenance[k].dependent_rows.iter().map(Vec::len).collect(),
            independent_train_sizes: state.provenance[k].independent_rows.iter().map(Vec::len).collect(),
            theta_fold: fold_thetas[k].clone(),
        })
        .collect();
    let result = SplitResult {
        split,
        fold_seed: plan.seed(),
        theta,
        sigma: var.sigma,
        jacobian,
        residual,
        grid_residual,
        nu,
        folds,
        plan: Some(plan),
        influence: var.influence,
        propensity: eta.iter().map(|e| e.eta2[pidx]).collect(),
    };
    Ok((result, state))
}

fn check_residual(residual: f64, grid: f64, eps: f64) -> Result<()> {
    if residual <= grid + eps + RESIDUAL_SLACK * (1.0 + grid) {
        Ok(())
    } else {
        Err(LdmlError::SolverNoCandidate(format!(
            "residual {residual:e} exceeds grid minimum {grid:e} plus tolerance {eps:e}"
        )))
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Combine repetitions: component-wise median or mean of `theta`; for the
/// mean, `Sigma = (1/S) sum_s [Sigma_s + (1/S)(theta_s - mean)(theta_s - mean)']`;
/// for the median, the element-wise median of `Sigma_s + (theta_s - med)(theta_s - med)'`.
pub fn aggregate_splits(
    estimand: String,
    gamma: f64,
    n: usize,
    d: usize,
    splits: Vec<SplitResult>,
    aggregate: Aggregate,
    alpha: f64,
) -> EstimateReport {
    let s = splits.len() as f64;
    let center: Vec<f64> = (0..d)
        .map(|j| {
            let mut v: Vec<f64> = splits.iter().map(|r| r.theta[j]).collect();
            match aggregate {
                Aggregate::Mean => v.iter().sum::<f64>() / s,
                Aggregate::Median => median(&mut v),
            }
        })
        .collect();
    let adjusted = |r: &SplitResult, a: usize, b: usize, scale: f64| {
        r.sigma[a][b] + scale * (r.theta[a] - center[a]) * (r.theta[b] - center[b])
    };
    let combine = |f: &dyn Fn(&SplitResult) -> f64| -> f64 {
        let mut v: Vec<f64> = splits.iter().map(f).collect();
        match aggregate {
            Aggregate::Mean => v.iter().sum::<f64>() / s,
            Aggregate::Median => median(&mut v),
        }
    };
    let sigma: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| match aggregate {
                    Aggregate::Mean => combine(&|r| adjusted(r, a, b, 1.0 / s)),
                    Aggregate::Median => combine(&|r| adjusted(r, a, b, 1.0)),
                })
                .collect()
        })
        .collect();
    let jd = splits.first().map_or(0, |r| r.jacobian.d());
    let jacobian: Vec<Vec<f64>> = (0..jd)
        .map(|a| (0..jd).map(|b| combine(&|r| r.jacobian.matrix[a][b])).collect())
        .collect();
    let stderr: Vec<f64> = (0..d).map(|j| (sigma[j][j].max(0.0) / n as f64).sqrt()).collect();
    let (lower, upper) = (0..d)
        .map(|j| {
            let mut zeta = vec![0.0; d];
            zeta[j] = 1.0;
            let ci = confidence_interval(&center, &sigma, n, &zeta, alpha);
            (ci.lower, ci.upper)
        })
        .unzip();
    EstimateReport {
        estimand,
        gamma,
        n,
        d,
        theta: center,
        jacobian,
        sigma,
        stderr,
        ci: IntervalSet { lower, upper, alpha },
        splits,
        discarded: Vec::new(),
        warnings: Vec::new(),
    }
}

fn collect_splits(
    model: &MomentModel,
    config: &LdmlConfig,
    n: usize,
    results: Vec<Result<SplitResult>>,
) -> Result<EstimateReport> {
    let mut kept = Vec::new();
    let mut discarded = Vec::new();
    let mut first_err = None;
    for (s, r) in results.into_iter().enumerate() {
        match r {
            Ok(res) => kept.push(res),
            Err(e) if e.is_degenerate_fold() => {
                discarded.push(DiscardedSplit {
                    split: s,
                    code: e.code().to_owned(),
                    message: e.to_string(),
                });
                first_err.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(first_err.expect("at least one split ran"));
    }
    let mut report = aggregate_splits(
        model.name(),
        model.gamma(),
        n,
        model.d(),
        kept,
        config.aggregate,
        config.alpha,
    );
    for d in &discarded {
        report
            .warnings
            .push(format!("split {} discarded: {}", d.split, d.message));
    }
    if report
        .splits
        .iter()
        .any(|s| s.sigma.iter().flatten().any(|v| !v.is_finite()))
    {
        report.warnings.push("non-finite variance entries".into());
    }
    report.discarded = discarded;
    Ok(report)
}

/// Run LDML on `table` for `model` and aggregate over `config.splits` repetitions.
pub fn run_ldml(table: &ObservationTable, model: &MomentModel, config: &LdmlConfig) -> Result<EstimateReport> {
    config.validate()?;
    model.validate_table(table)?;
    let obs = Obs::rows(table);
    let results = map_indices(config.execution, config.splits, |s| {
        run_split(table, &obs, model, config, s, &SplitOptions::default()).map(|(r, _)| r)
    });
    collect_splits(model, config, table.n(), results)
}

/// Both arms of a treatment effect, estimated on the same fold plans with a
/// shared propensity, plus their difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub treated: EstimateReport,
    pub control: EstimateReport,
    pub effect: EstimateReport,
}

/// The control arm is the treated-arm problem on the table with treatment
/// (and, for lqte, instrument) flipped.
pub fn run_ldml_effect(table: &ObservationTable, model: &MomentModel, config: &LdmlConfig) -> Result<EffectReport> {
    config.validate()?;
    model.validate_table(table)?;
    let flipped = if model.needs_instrument() {
        table.with_flipped_treatment().with_flipped_instrument()
    } else {
        table.with_flipped_treatment()
    };
    let obs1 = Obs::rows(table);
    let obs0 = Obs::rows(&flipped);
    let pairs = map_indices(
        config.execution,
        config.splits,
        |s| -> Result<(SplitResult, SplitResult)> {
            let (r1, _) = run_split(table, &obs1, model, config, s, &SplitOptions::default())?;
            let shared: Vec<f64> = r1.propensity.iter().map(|p| 1.0 - p).collect();
            let opts = SplitOptions {
                plan: r1.plan.clone(),
                shared_propensity: Some(&shared),
            };
            let (r0, _) = run_split(&flipped, &obs0, model, config, s, &opts)?;
            Ok((r1, r0))
        },
    );
    let (mut res1, mut res0) = (Vec::new(), Vec::new());
    for p in pairs {
        match p {
            Ok((a, b)) => {
                res1.push(Ok(a));
                res0.push(Ok(b));
            }
            Err(e) if e.is_degenerate_fold() => {
                let fold = match e {
                    LdmlError::DegenerateTreatmentArm { fold } | LdmlError::EmptySubsample { fold, .. } => fold,
                    _ => 0,
                };
                res0.push(Err(LdmlError::DegenerateTreatmentArm { fold }));
                res1.push(Err(e));
            }
            Err(e) => return Err(e),
        }
    }
    let treated = collect_splits(model, config, table.n(), res1)?;
    let control = collect_splits(model, config, table.n(), res0)?;
    let effect = crate::inference::effect_difference(&treated, &control, true, config.aggregate)?;
    Ok(EffectReport {
        treated,
        control,
        effect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimands::{expectile_moment, quantile_cvar_moment, quantile_moment};
    use ndarray::Array2;

    fn obs_all_treated(ys: &[f64]) -> Vec<Obs> {
        ys.iter().map(|&y| Obs { t: true, y, w: false }).collect()
    }

    fn unit_eta(n: usize) -> Vec<NuisanceRow> {
        let e = NuisanceRow {
            eta2: [1.0; 2],
            ..Default::default()
        };
        vec![e; n]
    }

    #[test]
    fn ipw_three_points_root() {
        let obs = obs_all_treated(&[1.0, 2.0, 3.0]);
        let model = ipw_moment(&quantile_moment(0.5).unwrap());
        let sol = solve_moment(&model, &obs, &unit_eta(3), &[0, 1, 2]).unwrap();
        assert_eq!(sol.theta, vec![2.0]);
    }

    #[test]
    fn cvar_closed_form_on_three_points() {
        let obs = obs_all_treated(&[1.0, 2.0, 3.0]);
        let model = quantile_cvar_moment(2.0 / 3.0).unwrap();
        let sol = solve_moment(&model, &obs, &unit_eta(3), &[0, 1, 2]).unwrap();
        assert_eq!(sol.theta[0], 2.0);
        assert!((sol.theta[1] - 3.0).abs() < 1e-12, "{}", sol.theta[1]);
    }

    #[test]
    fn expectile_half_is_mean() {
        let ys = [0.3, -1.2, 4.0, 2.2];
        let obs = obs_all_treated(&ys);
        let model = expectile_moment(0.5).unwrap();
        let sol = solve_moment(&model, &obs, &unit_eta(4), &[0, 1, 2, 3]).unwrap();
        assert!((sol.theta[0] - ys.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_by_mean() {
        let mk = |t: f64| SplitResult {
            split: 0,
            fold_seed: 0,
            theta: vec![t],
            sigma: vec![vec![0.0]],
            jacobian: JacobianEstimate::scalar(1.0, crate::estimands::JacobianRecipe::KdeQuantile, None),
            residual: 0.0,
            grid_residual: 0.0,
            nu: None,
            folds: vec![],
            plan: None,
            influence: vec![],
            propensity: vec![],
        };
        let r = aggregate_splits("q".into(), 0.5, 10, 1, vec![mk(1.0), mk(3.0)], Aggregate::Mean, 0.05);
        assert_eq!(r.theta, vec![2.0]);
        assert_eq!(r.sigma, vec![vec![0.5]]);
        let r = aggregate_splits(
            "q".into(),
            0.5,
            10,
            1,
            vec![mk(1.0), mk(3.0), mk(10.0)],
            Aggregate::Median,
            0.05,
        );
        assert_eq!(r.theta, vec![3.0]);
        // median of 0 + (theta_s - 3)^2 over {4, 0, 49}
        assert_eq!(r.sigma, vec![vec![4.0]]);
    }

    fn toy_table(n: usize, seed: u64) -> ObservationTable {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
        let t: Vec<bool> = (0..n).map(|i| rng.random::<f64>() < 0.3 + 0.4 * x[[i, 0]]).collect();
        let y: Vec<f64> = (0..n).map(|i| x[[i, 1]] + rng.random::<f64>()).collect();
        ObservationTable::new(x, t, y, None).unwrap()
    }

    #[test]
    fn localization_folds_are_disjoint_from_initial_folds() {
        let table = toy_table(300, 1);
        let obs = Obs::rows(&table);
        let model = quantile_moment(0.5).unwrap();
        let config = LdmlConfig {
            learners: LearnerSet::uniform(LearnerConfig::logistic()),
            ..Default::default()
        };
        let (_, state) = run_split(&table, &obs, &model, &config, 0, &SplitOptions::default()).unwrap();
        for (k, prov) in state.provenance.iter().enumerate() {
            let fold = state.plan.fold(k);
            assert!(!prov.initial_rows.is_empty());
            for dep in &prov.dependent_rows {
                assert!(dep.iter().all(|i| !prov.initial_rows.contains(i)));
                assert!(dep.iter().all(|i| !fold.contains(i)));
            }
            for ind in &prov.independent_rows {
                assert!(ind.iter().all(|i| !fold.contains(i)));
            }
            assert!(prov.initial_rows.iter().all(|i| !fold.contains(i)));
        }
    }

    #[test]
    fn constant_learner_predicts_treated_mean_of_indicator() {
        let table = toy_table(200, 2);
        let obs = Obs::rows(&table);
        let model = quantile_moment(0.5).unwrap();
        let config = LdmlConfig {
            learners: LearnerSet::uniform(LearnerConfig::Constant),
            ..Default::default()
        };
        let (_, state) = run_split(&table, &obs, &model, &config, 0, &SplitOptions::default()).unwrap();
        for k in 0..state.plan.k() {
            let th = state.theta_init[k].unwrap();
            let train = &state.provenance[k].dependent_rows[0];
            let expect = train.iter().filter(|&&i| obs[i].y <= th).count() as f64 / train.len() as f64;
            let expect = expect.clamp(config.clip.0, config.clip.1);
            for &i in state.plan.fold(k) {
                assert!((state.values[i].eta1[0] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ldml_is_bit_reproducible_across_execution_modes() {
        let table = toy_table(250, 3);
        let model = quantile_moment(0.4).unwrap();
        let mut config = LdmlConfig {
            learners: LearnerSet::uniform(LearnerConfig::Gbt(crate::learners::GbtParams {
                trees: 20,
                ..Default::default()
            })),
            seed: 17,
            ..Default::default()
        };
        config.execution = Execution::Sequential;
        let a = run_ldml(&table, &model, &config).unwrap();
        config.execution = Execution::Parallel;
        let b = run_ldml(&table, &model, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initial_ipw_needs_two_initial_folds() {
        let table = toy_table(100, 4);
        let obs = Obs::rows(&table);
        let model = quantile_moment(0.5).unwrap();
        let config = LdmlConfig::default();
        let ctx = FitContext {
            table: &table,
            obs: &obs,
            model: &model,
            config: &config,
            seed: 0,
        };
        let plan = make_fold_plan(100, 5, 1, 0, None).unwrap();
        assert!(matches!(
            fit_initial_ipw(&ctx, &plan, 0, None),
            Err(LdmlError::KPrimeTooSmall(1))
        ));
    }

    #[test]
    fn untreated_initial_split_is_degenerate() {
        // the first 40 rows are all untreated; with an unshuffled-equivalent plan
        // built from a stratify vector we cannot force this, so use a table with
        // a single treated row
        let n = 50;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let mut t = vec![false; n];
        t[0] = true;
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let table = ObservationTable::new(x, t, y, None).unwrap();
        let obs = Obs::rows(&table);
        let model = quantile_moment(0.5).unwrap();
        let config = LdmlConfig::default();
        let ctx = FitContext {
            table: &table,
            obs: &obs,
            model: &model,
            config: &config,
            seed: 0,
        };
        let plan = make_fold_plan(n, 5, 2, 0, None).unwrap();
        let errs = (0..5).filter(|&k| {
            matches!(
                fit_initial_ipw(&ctx, &plan, k, None),
                Err(LdmlError::DegenerateTreatmentArm { .. })
            )
        });
        assert!(errs.count() >= 3);
    }

    #[test]
    fn empty_treated_localization_folds_are_reported() {
        let n = 50;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let t = vec![false; n];
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let table = ObservationTable::new(x, t, y, None).unwrap();
        let obs = Obs::rows(&table);
        let model = quantile_moment(0.5).unwrap();
        let config = LdmlConfig::default();
        let ctx = FitContext {
            table: &table,
            obs: &obs,
            model: &model,
            config: &config,
            seed: 0,
        };
        let plan = make_fold_plan(n, 5, 2, 0, None).unwrap();
        let err = fit_localized_nuisances(&ctx, &plan, &[Some(0.0); 5], &NuisanceOptions::default()).unwrap_err();
        assert!(matches!(err, LdmlError::EmptySubsample { .. }));
    }

    #[test]
    fn weight_normalization_gives_unit_mean_per_fold() {
        let table = toy_table(300, 5);
        let obs = Obs::rows(&table);
        let model = quantile_moment(0.5).unwrap();
        let config = LdmlConfig {
            learners: LearnerSet::uniform(LearnerConfig::logistic()),
            normalize_weights: true,
            ..Default::default()
        };
        let (_, state) = run_split(&table, &obs, &model, &config, 0, &SplitOptions::default()).unwrap();
        for k in 0..state.plan.k() {
            let rows = state.plan.fold(k);
            let w: f64 = rows
                .iter()
                .filter(|&&i| obs[i].t)
                .map(|&i| 1.0 / state.values[i].eta2[0])
                .sum::<f64>()
                / rows.len() as f64;
            assert!((w - 1.0).abs() < 1e-12, "fold {k}: {w}");
        }
    }
}
