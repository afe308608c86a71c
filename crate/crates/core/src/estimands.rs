//! Estimating equations and their nuisance recipes.
//!
//! A [`MomentModel`] bundles the per-row moment `psi`, the list of regression
//! tasks that produce its nuisances, and how its Jacobian is estimated. Every
//! equation here has the shape `psi(Z; theta, eta1(Z; theta1), eta2(Z))` where
//! `eta1` depends on the target and is only ever fitted at a fixed initial
//! value `theta1'`, and `eta2` does not depend on the target.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::ObservationTable;
use crate::error::{LdmlError, Result};

/// Largest equation dimension supported.
pub const MAX_D: usize = 2;

pub type Vector = [f64; MAX_D];

/// The observable part of one row that enters `psi` directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obs {
    pub t: bool,
    pub y: f64,
    pub w: bool,
}

impl Obs {
    pub fn rows(table: &ObservationTable) -> Vec<Obs> {
        let w = table.instrument();
        (0..table.n())
            .map(|i| Obs {
                t: table.treatment()[i],
                y: table.outcome()[i],
                w: w.is_some_and(|w| w[i]),
            })
            .collect()
    }
}

/// Nuisance values attached to one row.
///
/// Slot meaning per estimand:
///
/// | estimand      | `eta1`                          | `eta2`                 |
/// |---------------|---------------------------------|------------------------|
/// | quantile      | `P(Y<=t'|X,T=1)`                | `P(T=1|X)`             |
/// | quantile_cvar | cdf, `E[(Y-t')+|X,T=1]`         | `P(T=1|X)`             |
/// | expectile     | `E[(Y-t')+|X,T=1]`              | `E[Y|X,T=1]`, `P(T=1|X)` |
/// | lqte          | `P(T=1,Y<=t'|X,W=w)`, w = 1, 0  | `P(W=1|X)`             |
/// | custom        | `E[U_j(Y;t')|X,T=1]`            | `P(T=1|X)`             |
///
/// `nu` is the scalar first-stage effect used by the lqte equation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NuisanceRow {
    pub eta1: Vector,
    pub eta2: Vector,
    pub nu: f64,
}

type UFn = dyn Fn(f64, f64) -> Vector + Send + Sync;
type VFn = dyn Fn(f64) -> Vector + Send + Sync;

/// A complete-data moment `U(y; theta1) + V(theta)` supplied by the caller.
///
/// The first component identifies `theta1`. When `d = 2`, the second
/// component enters as `U_2(y; theta1) + v_2(theta1) - theta2`, i.e. `theta2`
/// is a functional defined given `theta1`, as with CVaR.
#[derive(Clone)]
pub struct CustomMoment {
    d: usize,
    u: Arc<UFn>,
    v: Arc<VFn>,
    probability_labels: bool,
}

impl CustomMoment {
    pub fn new(
        d: usize,
        u: impl Fn(f64, f64) -> Vector + Send + Sync + 'static,
        v: impl Fn(f64) -> Vector + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(1..=MAX_D).contains(&d) {
            return Err(LdmlError::InvalidConfig(format!(
                "custom moment dimension {d} not in 1..=2"
            )));
        }
        Ok(Self {
            d,
            u: Arc::new(u),
            v: Arc::new(v),
            probability_labels: false,
        })
    }

    /// Declare that every `U_j` is an indicator, so its regressions are
    /// probability-type (clipped, eligible for logistic learners).
    pub fn with_probability_labels(mut self) -> Self {
        self.probability_labels = true;
        self
    }

    pub fn u(&self, y: f64, theta1: f64) -> Vector {
        (self.u)(y, theta1)
    }

    pub fn v(&self, theta: &[f64]) -> Vector {
        let mut v = (self.v)(theta[0]);
        if self.d == 2 {
            v[1] -= theta[1];
        }
        v
    }
}

impl fmt::Debug for CustomMoment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomMoment")
            .field("d", &self.d)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum Estimand {
    Quantile,
    QuantileCvar,
    Expectile,
    Lqte,
    Custom(CustomMoment),
}

impl Estimand {
    pub fn name(&self) -> &'static str {
        match self {
            Estimand::Quantile => "quantile",
            Estimand::QuantileCvar => "quantile_cvar",
            Estimand::Expectile => "expectile",
            Estimand::Lqte => "lqte",
            Estimand::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianRecipe {
    KdeQuantile,
    QcvarBlock,
    ExpectileCdf,
    KdeLqte,
    /// Central difference of the averaged equation with a bandwidth-sized step.
    NumericSmoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverHint {
    /// Nondecreasing step function in `theta1`: binary search over sorted jumps.
    MonotoneStep,
    /// Step function with jumps of either sign: full prefix-sum scan.
    StepScan,
    /// Continuous piecewise-linear equation: exact root between kinks.
    PiecewiseLinear,
    /// Arbitrary: scan candidate outcomes, then bisect a sign change.
    ScanBisect,
}

/// What a nuisance regression is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// `1[Y <= theta1']`
    IndicatorLe,
    /// `max(Y - theta1', 0)`
    PositivePart,
    /// `1[T = 1, Y <= theta1']`
    TreatedIndicatorLe,
    Outcome,
    Treatment,
    Instrument,
    /// Component `j` of a custom `U(Y; theta1')`.
    CustomU(usize),
}

/// Which training rows a task uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    All,
    Treated,
    InstrumentEq(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerSlot {
    /// `P(T=1|X)` or `P(W=1|X)`
    Propensity,
    /// Binary localized regressions such as `P(Y<=theta1'|X,T=1)`.
    Localized,
    /// Real-valued regressions such as `E[Y|X,T=1]` or `E[(Y-theta1')+|X,T=1]`.
    Outcome,
    /// `P(T=1|X,W)` for the first-stage effect.
    Compliance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    Eta1(usize),
    Eta2(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NuisanceTask {
    pub name: &'static str,
    pub target: Target,
    pub filter: Filter,
    /// Needs `theta1'`, so it is fitted on the localization folds only.
    pub dependent: bool,
    pub slot: LearnerSlot,
    /// Predictions are clipped to the probability range.
    pub probability: bool,
    pub dest: Dest,
}

impl NuisanceTask {
    pub fn label(&self, obs: &Obs, theta1: f64, custom: Option<&CustomMoment>) -> f64 {
        let ind = |b: bool| f64::from(u8::from(b));
        match self.target {
            Target::IndicatorLe => ind(obs.y <= theta1),
            Target::PositivePart => (obs.y - theta1).max(0.0),
            Target::TreatedIndicatorLe => ind(obs.t && obs.y <= theta1),
            Target::Outcome => obs.y,
            Target::Treatment => ind(obs.t),
            Target::Instrument => ind(obs.w),
            Target::CustomU(j) => custom.expect("custom target without custom moment").u(obs.y, theta1)[j],
        }
    }

    pub fn keeps(&self, obs: &Obs) -> bool {
        match self.filter {
            Filter::All => true,
            Filter::Treated => obs.t,
            Filter::InstrumentEq(w) => obs.w == w,
        }
    }
}

/// An estimating equation at level `gamma`, either in its orthogonal form or
/// as the plain inverse-propensity-weighted equation of the same estimand.
#[derive(Debug, Clone)]
pub struct MomentModel {
    estimand: Estimand,
    gamma: f64,
    ipw: bool,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(LdmlError::InvalidGamma(gamma))
    }
}

pub fn quantile_moment(gamma: f64) -> Result<MomentModel> {
    MomentModel::new(Estimand::Quantile, gamma)
}

pub fn quantile_cvar_moment(gamma: f64) -> Result<MomentModel> {
    MomentModel::new(Estimand::QuantileCvar, gamma)
}

pub fn expectile_moment(gamma: f64) -> Result<MomentModel> {
    MomentModel::new(Estimand::Expectile, gamma)
}

pub fn lqte_moment(gamma: f64) -> Result<MomentModel> {
    MomentModel::new(Estimand::Lqte, gamma)
}

/// Orthogonal moment `1[T=1](U - eta1)/eta2 + eta1 + V` built from a custom
/// complete-data moment. `gamma` is only used by the default bandwidth and
/// report metadata.
pub fn custom_moment(moment: CustomMoment, gamma: f64) -> Result<MomentModel> {
    MomentModel::new(Estimand::Custom(moment), gamma)
}

/// The inverse-propensity-weighted equation `1[T=1] U / eta2 + V` of `base`;
/// for lqte, the weighting equation with the localized nuisances set to zero.
pub fn ipw_moment(base: &MomentModel) -> MomentModel {
    MomentModel {
        ipw: true,
        ..base.clone()
    }
}

impl MomentModel {
    pub fn new(estimand: Estimand, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self {
            estimand,
            gamma,
            ipw: false,
        })
    }

    pub fn estimand(&self) -> &Estimand {
        &self.estimand
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_ipw(&self) -> bool {
        self.ipw
    }

    pub fn name(&self) -> String {
        if self.ipw {
            format!("{}_ipw", self.estimand.name())
        } else {
            self.estimand.name().to_owned()
        }
    }

    pub fn d(&self) -> usize {
        match &self.estimand {
            Estimand::QuantileCvar => 2,
            Estimand::Custom(c) => c.d,
            _ => 1,
        }
    }

    pub fn d1(&self) -> usize {
        1
    }

    pub fn needs_instrument(&self) -> bool {
        matches!(self.estimand, Estimand::Lqte)
    }

    pub fn custom(&self) -> Option<&CustomMoment> {
        match &self.estimand {
            Estimand::Custom(c) => Some(c),
            _ => None,
        }
    }

    /// Where the propensity (of `T`, or of `W` for lqte) lives in `eta2`.
    pub fn propensity_index(&self) -> usize {
        match self.estimand {
            Estimand::Expectile => 1,
            _ => 0,
        }
    }

    pub fn validate_table(&self, table: &ObservationTable) -> Result<()> {
        if self.needs_instrument() && table.instrument().is_none() {
            return Err(LdmlError::MissingInstrument);
        }
        Ok(())
    }

    pub fn jacobian_recipe(&self) -> JacobianRecipe {
        match self.estimand {
            Estimand::Quantile => JacobianRecipe::KdeQuantile,
            Estimand::QuantileCvar => JacobianRecipe::QcvarBlock,
            Estimand::Expectile => JacobianRecipe::ExpectileCdf,
            Estimand::Lqte => JacobianRecipe::KdeLqte,
            Estimand::Custom(_) => JacobianRecipe::NumericSmoothed,
        }
    }

    pub fn solver_hint(&self) -> SolverHint {
        match self.estimand {
            Estimand::Quantile | Estimand::QuantileCvar => SolverHint::MonotoneStep,
            Estimand::Expectile => SolverHint::PiecewiseLinear,
            Estimand::Lqte => SolverHint::StepScan,
            Estimand::Custom(_) => SolverHint::ScanBisect,
        }
    }

    /// The regression tasks needed to evaluate `psi`.
    pub fn tasks(&self) -> Vec<NuisanceTask> {
        let propensity = |dest| NuisanceTask {
            name: "propensity",
            target: Target::Treatment,
            filter: Filter::All,
            dependent: false,
            slot: LearnerSlot::Propensity,
            probability: true,
            dest,
        };
        let localized = |name, target, filter, slot, probability, dest| NuisanceTask {
            name,
            target,
            filter,
            dependent: true,
            slot,
            probability,
            dest,
        };
        let instrument_propensity = NuisanceTask {
            name: "instrument_propensity",
            target: Target::Instrument,
            filter: Filter::All,
            dependent: false,
            slot: LearnerSlot::Propensity,
            probability: true,
            dest: Dest::Eta2(0),
        };
        let cdf = localized(
            "conditional_cdf",
            Target::IndicatorLe,
            Filter::Treated,
            LearnerSlot::Localized,
            true,
            Dest::Eta1(0),
        );
        let shortfall = |dest| {
            localized(
                "conditional_excess",
                Target::PositivePart,
                Filter::Treated,
                LearnerSlot::Outcome,
                false,
                dest,
            )
        };

        if self.ipw {
            return match self.estimand {
                Estimand::Lqte => vec![instrument_propensity],
                _ => vec![propensity(Dest::Eta2(self.propensity_index()))],
            };
        }
        match &self.estimand {
            Estimand::Quantile => vec![cdf, propensity(Dest::Eta2(0))],
            Estimand::QuantileCvar => vec![cdf, shortfall(Dest::Eta1(1)), propensity(Dest::Eta2(0))],
            Estimand::Expectile => vec![
                shortfall(Dest::Eta1(0)),
                NuisanceTask {
                    name: "conditional_mean",
                    target: Target::Outcome,
                    filter: Filter::Treated,
                    dependent: false,
                    slot: LearnerSlot::Outcome,
                    probability: false,
                    dest: Dest::Eta2(0),
                },
                propensity(Dest::Eta2(1)),
            ],
            Estimand::Lqte => vec![
                localized(
                    "complier_cdf_w1",
                    Target::TreatedIndicatorLe,
                    Filter::InstrumentEq(true),
                    LearnerSlot::Localized,
                    true,
                    Dest::Eta1(0),
                ),
                localized(
                    "complier_cdf_w0",
                    Target::TreatedIndicatorLe,
                    Filter::InstrumentEq(false),
                    LearnerSlot::Localized,
                    true,
                    Dest::Eta1(1),
                ),
                instrument_propensity,
            ],
            Estimand::Custom(c) => {
                let mut tasks: Vec<NuisanceTask> = (0..c.d)
                    .map(|j| {
                        let slot = if c.probability_labels {
                            LearnerSlot::Localized
                        } else {
                            LearnerSlot::Outcome
                        };
                        localized(
                            "conditional_u",
                            Target::CustomU(j),
                            Filter::Treated,
                            slot,
                            c.probability_labels,
                            Dest::Eta1(j),
                        )
                    })
                    .collect();
                tasks.push(propensity(Dest::Eta2(0)));
                tasks
            }
        }
    }

    /// Evaluate `psi` for one row. Components beyond `d()` are zero.
    pub fn psi(&self, obs: &Obs, theta: &[f64], eta: &NuisanceRow) -> Vector {
        let g = self.gamma;
        let ind = |b: bool| f64::from(u8::from(b));
        let th1 = theta[0];
        if self.ipw {
            return match &self.estimand {
                Estimand::Lqte => lqte_psi(obs, th1, 0.0, 0.0, eta.eta2[0], eta.nu, g),
                _ => {
                    let a = ind(obs.t) / eta.eta2[self.propensity_index()];
                    let (u, v) = self.complete_uv(obs.y, theta);
                    // skip the weighted term for untreated rows so a zero propensity cannot give 0 * inf
                    let wu = |j: usize| if obs.t { a * u[j] } else { 0.0 };
                    [wu(0) + v[0], wu(1) + v[1]]
                }
            };
        }
        match &self.estimand {
            Estimand::Quantile => [quantile_component(obs, th1, eta.eta1[0], eta.eta2[0], g), 0.0],
            Estimand::QuantileCvar => {
                let (e11, e12, pi) = (eta.eta1[0], eta.eta1[1], eta.eta2[0]);
                let resid = if obs.t {
                    ((obs.y - th1).max(0.0) - e12) / ((1.0 - g) * pi)
                } else {
                    0.0
                };
                [
                    quantile_component(obs, th1, e11, pi, g),
                    resid + th1 + e12 / (1.0 - g) - theta[1],
                ]
            }
            Estimand::Expectile => {
                let (e1, e21, e22) = (eta.eta1[0], eta.eta2[0], eta.eta2[1]);
                let weighted = if obs.t {
                    ((1.0 - g) * (obs.y - e21) - (1.0 - 2.0 * g) * ((obs.y - th1).max(0.0) - e1)) / e22
                } else {
                    0.0
                };
                [weighted + (1.0 - g) * (e21 - th1) - (1.0 - 2.0 * g) * e1, 0.0]
            }
            Estimand::Lqte => [
                lqte_psi(obs, th1, eta.eta1[0], eta.eta1[1], eta.eta2[0], eta.nu, g)[0],
                0.0,
            ],
            Estimand::Custom(c) => {
                let u = c.u(obs.y, th1);
                let v = c.v(theta);
                let mut out = [0.0; MAX_D];
                for j in 0..c.d {
                    let resid = if obs.t { (u[j] - eta.eta1[j]) / eta.eta2[0] } else { 0.0 };
                    out[j] = resid + eta.eta1[j] + v[j];
                }
                out
            }
        }
    }

    /// Complete-data pair `(U(y; theta1), V(theta))`; not defined for lqte.
    pub fn complete_uv(&self, y: f64, theta: &[f64]) -> (Vector, Vector) {
        let g = self.gamma;
        let th1 = theta[0];
        let ind = f64::from(u8::from(y <= th1));
        match &self.estimand {
            Estimand::Quantile => ([ind, 0.0], [-g, 0.0]),
            Estimand::QuantileCvar => (
                [ind, (y - th1).max(0.0) / (1.0 - g)],
                [-g, th1 - theta.get(1).copied().unwrap_or(0.0)],
            ),
            Estimand::Expectile => (
                [(1.0 - g) * (y - th1) - (1.0 - 2.0 * g) * (y - th1).max(0.0), 0.0],
                [0.0, 0.0],
            ),
            Estimand::Custom(c) => (c.u(y, th1), c.v(theta)),
            Estimand::Lqte => panic!("the lqte equation has no complete-data form"),
        }
    }

    /// Mean of `psi` over the given rows.
    pub fn mean_psi(&self, obs: &[Obs], eta: &[NuisanceRow], rows: &[usize], theta: &[f64]) -> Vector {
        let mut acc = [0.0; MAX_D];
        for &i in rows {
            let p = self.psi(&obs[i], theta, &eta[i]);
            acc[0] += p[0];
            acc[1] += p[1];
        }
        let m = rows.len() as f64;
        [acc[0] / m, acc[1] / m]
    }
}

fn quantile_component(obs: &Obs, th1: f64, eta1: f64, pi: f64, g: f64) -> f64 {
    let resid = if obs.t {
        (f64::from(u8::from(obs.y <= th1)) - eta1) / pi
    } else {
        0.0
    };
    resid + eta1 - g
}

fn lqte_psi(obs: &Obs, th1: f64, e11: f64, e12: f64, pi_w: f64, nu: f64, g: f64) -> Vector {
    let hit = f64::from(u8::from(obs.t && obs.y <= th1));
    let branch = if obs.w {
        (hit - e11) / pi_w
    } else {
        -(hit - e12) / (1.0 - pi_w)
    };
    [(e11 - e12 + branch) / nu - g, 0.0]
}
