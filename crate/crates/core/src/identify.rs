//! Post-fit identification of the exogenous/maturity/vintage split.
//!
//! Every representation of a fit differs from every other by a multiple of
//! the null vector `c`. A [`ConstraintSpec`] reduces to one linear functional
//! `d` with target `k`; the identified estimate is `beta + gamma * c` with
//! `gamma = (k - d^T beta) / (d^T c)`. Fitted values never change.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::design::{Block, EmvDesign, Layout};
use crate::error::{EmvError, Result};
use crate::estimator::FitResult;

/// Default age threshold for the maturity-slope constraint (months).
pub const DEFAULT_A_STAR: u32 = 60;
/// Default number of recent vintages in the vintage-trend window.
pub const DEFAULT_WINDOW: usize = 18;
/// Minimum `|d^T c|` (relative to `|d| |c|`) for a constraint to identify the drift.
pub const IDENTIFY_TOL: f64 = 1e-12;

/// A single linear identifiability constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintSpec {
    /// Final two vintage effects are equal (SAS-style default).
    LastTwoVintagesEqual,
    /// First and last vintage effects are equal (R-style default).
    FirstLastVintagesEqual,
    /// Minimum-length representative (`c^T beta = 0`).
    Intrinsic,
    /// OLS slope of vintage effect on vintage index is zero over a window.
    VintageTrendZero {
        /// Number of most recent vintages.
        window: usize,
        /// Explicit vintage set; overrides `window` when present.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vintages: Option<Vec<i64>>,
    },
    /// OLS slope of maturity effect on age equals `k` for ages above `a_star`.
    MaturitySlope { k: f64, a_star: u32 },
    /// OLS slope of exogenous effect on time equals a reference series' slope.
    MatchParametric { target_slope: f64 },
}

impl ConstraintSpec {
    pub fn maturity_slope(k: f64, a_star: u32) -> Self {
        ConstraintSpec::MaturitySlope { k, a_star }
    }

    pub fn vintage_trend_zero(window: usize) -> Self {
        ConstraintSpec::VintageTrendZero {
            window,
            vintages: None,
        }
    }

    /// Build a spec from flat parameters as given on a command line or in a
    /// query string. Missing parameters take their defaults (`k = 0`,
    /// `a_star = 60`, `window = 18`).
    pub fn from_parts(
        kind: &str,
        k: Option<f64>,
        a_star: Option<u32>,
        window: Option<usize>,
        target_slope: Option<f64>,
    ) -> Result<Self> {
        Ok(match kind {
            "last-two-vintages-equal" => ConstraintSpec::LastTwoVintagesEqual,
            "first-last-vintages-equal" => ConstraintSpec::FirstLastVintagesEqual,
            "intrinsic" => ConstraintSpec::Intrinsic,
            "vintage-trend-zero" => ConstraintSpec::vintage_trend_zero(window.unwrap_or(DEFAULT_WINDOW)),
            "maturity-slope" => ConstraintSpec::maturity_slope(k.unwrap_or(0.0), a_star.unwrap_or(DEFAULT_A_STAR)),
            "match-parametric" => ConstraintSpec::MatchParametric {
                target_slope: target_slope
                    .ok_or_else(|| EmvError::InvalidSpec("match-parametric needs target_slope".into()))?,
            },
            other => return Err(EmvError::InvalidSpec(format!("unknown constraint kind {other:?}"))),
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ConstraintSpec::LastTwoVintagesEqual => "last-two-vintages-equal",
            ConstraintSpec::FirstLastVintagesEqual => "first-last-vintages-equal",
            ConstraintSpec::Intrinsic => "intrinsic",
            ConstraintSpec::VintageTrendZero { .. } => "vintage-trend-zero",
            ConstraintSpec::MaturitySlope { .. } => "maturity-slope",
            ConstraintSpec::MatchParametric { .. } => "match-parametric",
        }
    }

    /// The functional `d` (layout order) and its target `k`.
    pub fn functional(&self, layout: &Layout) -> Result<(DVector<f64>, f64)> {
        let p = layout.n_params();
        let mut d = DVector::zeros(p);
        let vin = layout.block_range(Block::Vintage);
        match self {
            ConstraintSpec::LastTwoVintagesEqual | ConstraintSpec::FirstLastVintagesEqual => {
                if vin.len() < 2 {
                    return Err(EmvError::TooFewElements(
                        "vintage equality constraints need at least 2 vintages".into(),
                    ));
                }
                let last = vin.end - 1;
                let other = match self {
                    ConstraintSpec::LastTwoVintagesEqual => last - 1,
                    _ => vin.start,
                };
                d[last] = 1.0;
                d[other] = -1.0;
                Ok((d, 0.0))
            }
            ConstraintSpec::Intrinsic => Ok((layout.null_vector(), 0.0)),
            ConstraintSpec::VintageTrendZero { window, vintages } => {
                let set: Vec<i64> = match vintages {
                    Some(explicit) => {
                        let mut s = explicit.clone();
                        s.sort_unstable();
                        s.dedup();
                        if let Some(missing) = s.iter().find(|v| layout.vintage_col(**v).is_none()) {
                            return Err(EmvError::InvalidSpec(format!("vintage {missing} is not observed")));
                        }
                        s
                    }
                    None => {
                        let n = layout.vintages.len();
                        layout.vintages[n.saturating_sub(*window)..].to_vec()
                    }
                };
                if set.len() < 2 {
                    return Err(EmvError::TooFewElements(format!(
                        "vintage trend window has {} vintage(s); at least 2 are required",
                        set.len()
                    )));
                }
                slope_functional(&mut d, set.iter().map(|&v| (layout.vintage_col(v).unwrap(), v as f64)));
                Ok((d, 0.0))
            }
            ConstraintSpec::MaturitySlope { k, a_star } => {
                let tail: Vec<u32> = layout.ages.iter().copied().filter(|a| a > a_star).collect();
                if tail.len() < 2 {
                    return Err(EmvError::TooFewElements(format!(
                        "maturity slope needs at least 2 ages above A*={a_star}, found {}",
                        tail.len()
                    )));
                }
                slope_functional(&mut d, tail.iter().map(|&a| (layout.age_col(a).unwrap(), a as f64)));
                Ok((d, *k))
            }
            ConstraintSpec::MatchParametric { target_slope } => {
                if layout.times.len() < 2 {
                    return Err(EmvError::TooFewElements("need at least 2 time levels".into()));
                }
                slope_functional(&mut d, layout.times.iter().map(|&t| (layout.time_col(t).unwrap(), t as f64)));
                Ok((d, *target_slope))
            }
        }
    }
}

/// Fill `d` with OLS-slope weights `(x - x_bar) / sum (x - x_bar)^2`.
fn slope_functional(d: &mut DVector<f64>, points: impl Iterator<Item = (usize, f64)> + Clone) {
    let n = points.clone().count() as f64;
    let xbar = points.clone().map(|(_, x)| x).sum::<f64>() / n;
    let sxx: f64 = points.clone().map(|(_, x)| (x - xbar).powi(2)).sum();
    for (col, x) in points {
        d[col] = (x - xbar) / sxx;
    }
}

impl fmt::Display for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintSpec::VintageTrendZero { window, vintages: None } => {
                write!(f, "vintage-trend-zero(window={window})")
            }
            ConstraintSpec::VintageTrendZero { vintages: Some(v), .. } => {
                write!(f, "vintage-trend-zero(vintages={v:?})")
            }
            ConstraintSpec::MaturitySlope { k, a_star } => write!(f, "maturity-slope(k={k},a_star={a_star})"),
            ConstraintSpec::MatchParametric { target_slope } => {
                write!(f, "match-parametric(slope={target_slope})")
            }
            other => f.write_str(other.kind_name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeEffect {
    pub age: u32,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEffect {
    pub time: u32,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VintageEffect {
    pub vintage: i64,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
}

/// An identified estimate: intercept plus zero-mean effect blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// The constraint that identifies this representation (`None` for
    /// generator ground truth and other unconstrained representations).
    pub constraint: Option<ConstraintSpec>,
    /// Multiple of `c` separating this representation from the minimum-norm one.
    pub gamma_applied: f64,
    pub intercept: f64,
    pub maturity: Vec<AgeEffect>,
    pub exogenous: Vec<TimeEffect>,
    pub vintage: Vec<VintageEffect>,
}

impl Decomposition {
    /// Assemble from a layout-ordered coefficient vector. `se` (if given) is
    /// layout-ordered as well; the intercept entry is ignored.
    pub fn from_beta(
        layout: &Layout,
        beta: &DVector<f64>,
        constraint: Option<ConstraintSpec>,
        gamma_applied: f64,
        se: Option<&[f64]>,
    ) -> Self {
        let se_at = |j: usize| se.map(|s| s[j]);
        Decomposition {
            constraint,
            gamma_applied,
            intercept: beta[0],
            maturity: layout
                .ages
                .iter()
                .enumerate()
                .map(|(i, &age)| {
                    let j = layout.age_offset() + i;
                    AgeEffect { age, value: beta[j], se: se_at(j) }
                })
                .collect(),
            exogenous: layout
                .times
                .iter()
                .enumerate()
                .map(|(i, &time)| {
                    let j = layout.time_offset() + i;
                    TimeEffect { time, value: beta[j], se: se_at(j) }
                })
                .collect(),
            vintage: layout
                .vintages
                .iter()
                .enumerate()
                .map(|(i, &vintage)| {
                    let j = layout.vintage_offset() + i;
                    VintageEffect { vintage, value: beta[j], se: se_at(j) }
                })
                .collect(),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            ages: self.maturity.iter().map(|e| e.age).collect(),
            times: self.exogenous.iter().map(|e| e.time).collect(),
            vintages: self.vintage.iter().map(|e| e.vintage).collect(),
        }
    }

    /// Coefficients in layout order.
    pub fn beta(&self) -> DVector<f64> {
        let mut b = Vec::with_capacity(1 + self.maturity.len() + self.exogenous.len() + self.vintage.len());
        b.push(self.intercept);
        b.extend(self.maturity.iter().map(|e| e.value));
        b.extend(self.exogenous.iter().map(|e| e.value));
        b.extend(self.vintage.iter().map(|e| e.value));
        DVector::from_vec(b)
    }

    pub fn maturity_at(&self, age: u32) -> Option<f64> {
        self.maturity.iter().find(|e| e.age == age).map(|e| e.value)
    }

    pub fn exogenous_at(&self, time: u32) -> Option<f64> {
        self.exogenous.iter().find(|e| e.time == time).map(|e| e.value)
    }

    pub fn vintage_at(&self, vintage: i64) -> Option<f64> {
        self.vintage.iter().find(|e| e.vintage == vintage).map(|e| e.value)
    }

    /// Linear predictor of cell `(age, time)` when all three levels are present.
    pub fn theta(&self, age: u32, time: u32) -> Option<f64> {
        Some(
            self.intercept
                + self.maturity_at(age)?
                + self.exogenous_at(time)?
                + self.vintage_at(crate::panel::vintage_of(age, time))?,
        )
    }

    /// Linear predictor for each design row.
    pub fn reconstruct(&self, design: &EmvDesign) -> DVector<f64> {
        design.apply(&self.beta())
    }

    /// `d^T beta - k` for a constraint (0 when satisfied).
    pub fn constraint_residual(&self, spec: &ConstraintSpec) -> Result<f64> {
        let (d, k) = spec.functional(&self.layout())?;
        Ok(d.dot(&self.beta()) - k)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Long format `block,level,value,se`; the intercept has an empty level
    /// and missing standard errors are empty.
    pub fn to_csv_string(&self) -> String {
        let se = |s: Option<f64>| s.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("block,level,value,se\nintercept,,{},\n", self.intercept);
        for e in &self.maturity {
            out.push_str(&format!("maturity,{},{},{}\n", e.age, e.value, se(e.se)));
        }
        for e in &self.exogenous {
            out.push_str(&format!("exogenous,{},{},{}\n", e.time, e.value, se(e.se)));
        }
        for e in &self.vintage {
            out.push_str(&format!("vintage,{},{},{}\n", e.vintage, e.value, se(e.se)));
        }
        out
    }
}

/// `gamma = (k - d^T beta) / (d^T c)`, refusing functionals orthogonal to `c`.
pub fn shift_for(d: &DVector<f64>, k: f64, c: &DVector<f64>, beta: &DVector<f64>) -> Result<f64> {
    let dc = d.dot(c);
    if dc.abs() <= IDENTIFY_TOL * d.norm() * c.norm() {
        return Err(EmvError::NonIdentifying);
    }
    Ok((k - d.dot(beta)) / dc)
}

fn resolve(layout: &Layout, spec: &ConstraintSpec, beta: &DVector<f64>) -> Result<(DVector<f64>, f64, DVector<f64>, f64)> {
    let (d, k) = spec.functional(layout)?;
    let c = layout.null_vector();
    let gamma = shift_for(&d, k, &c, beta)?;
    Ok((d.clone(), d.dot(&c), c, gamma))
}

/// Shift the fit to the representation satisfying `spec`.
///
/// Each reported effect is the estimable function `(e_j - c_j d / d^T c)^T beta`,
/// so its standard error is well defined under every constraint.
pub fn apply_constraint(fit: &FitResult, design: &EmvDesign, spec: &ConstraintSpec) -> Result<Decomposition> {
    if &fit.layout != design.layout() {
        return Err(EmvError::ShapeMismatch("fit and design layouts differ".into()));
    }
    let layout = design.layout();
    let (d, dc, c, gamma) = resolve(layout, spec, &fit.beta)?;
    let mut beta = &fit.beta + &c * gamma;
    layout.recenter(&mut beta);

    let sigma = fit.sigma2.sqrt();
    let ft = fit.cov_factor.transpose();
    let ftd = &ft * &d;
    let se: Vec<f64> = (0..layout.n_params())
        .map(|j| {
            let row = ft.column(j) - &ftd * (c[j] / dc);
            sigma * row.norm()
        })
        .collect();
    // minimum-norm fits sit at gamma = 0
    let base = c.dot(&fit.beta) / c.norm_squared();
    Ok(Decomposition::from_beta(layout, &beta, Some(spec.clone()), base + gamma, Some(&se)))
}

/// Re-identify an existing decomposition under `spec` (standard errors are dropped).
pub fn reidentify(decomp: &Decomposition, spec: &ConstraintSpec) -> Result<Decomposition> {
    let layout = decomp.layout();
    let beta0 = decomp.beta();
    let (_, _, c, gamma) = resolve(&layout, spec, &beta0)?;
    let mut beta = beta0 + &c * gamma;
    layout.recenter(&mut beta);
    Ok(Decomposition::from_beta(
        &layout,
        &beta,
        Some(spec.clone()),
        decomp.gamma_applied + gamma,
        None,
    ))
}

/// The minimum-length representative (projection orthogonal to `c`).
pub fn intrinsic(fit: &FitResult, design: &EmvDesign) -> Result<Decomposition> {
    apply_constraint(fit, design, &ConstraintSpec::Intrinsic)
}

/// One maturity-slope decomposition per `k`, in input order.
pub fn constraint_sweep(fit: &FitResult, design: &EmvDesign, a_star: u32, ks: &[f64]) -> Result<Vec<Decomposition>> {
    if ks.is_empty() {
        return Err(EmvError::InvalidSpec("sweep needs at least one k".into()));
    }
    ks.iter()
        .map(|&k| apply_constraint(fit, design, &ConstraintSpec::maturity_slope(k, a_star)))
        .collect()
}

/// Pretty JSON array of decompositions, as emitted for a sweep.
pub fn decompositions_to_json(decomps: &[Decomposition]) -> Result<String> {
    Ok(serde_json::to_string_pretty(decomps)?)
}

/// Tolerance for [`drift_report`].
pub const DRIFT_TOL: f64 = 1e-8;

/// The scalar `gamma` with `d2 = d1 + gamma * c` blockwise.
pub fn drift_report(d1: &Decomposition, d2: &Decomposition) -> Result<f64> {
    let layout = d1.layout();
    if layout != d2.layout() {
        return Err(EmvError::NotCEquivalent { residual: f64::INFINITY });
    }
    let c = layout.null_vector();
    let b1 = d1.beta();
    let diff = d2.beta() - &b1;
    let gamma = diff.dot(&c) / c.norm_squared();
    let residual = (&diff - &c * gamma).amax();
    if residual > DRIFT_TOL * b1.amax().max(1.0) {
        return Err(EmvError::NotCEquivalent { residual });
    }
    Ok(gamma)
}
