//! Forecasts of the response beyond the observed calendar window.
//!
//! A forecast needs identified effects: a constrained [`Decomposition`], a
//! full-rank semiparametric fit, or a random-effects fit. The exogenous block
//! comes from future covariates when the fit has macro coefficients and is
//! otherwise held at its last fitted value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EmvError, Result};
use crate::identify::{AgeEffect, Decomposition, TimeEffect, VintageEffect, DEFAULT_WINDOW};
use crate::linalg::ols_slope;
use crate::panel::{vintage_of, ResponseTransform};
use crate::semiparametric::{MacroPanel, SemiparametricFit};
use crate::vintage_effects::{ProcessKind, RandomEffectsFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaturityTail {
    HoldLast,
    StraightLine { a_star: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VintageMode {
    /// Mean of the last `window` fitted vintage effects.
    RecentLevel { window: usize },
    /// Conditional mean of the fitted vintage process.
    Ar1,
    /// Explicit effects for the vintages after the last fitted one, in order.
    Override { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSpec {
    pub horizon_months: u32,
    pub maturity_tail: MaturityTail,
    pub vintage_mode: VintageMode,
    /// Covariates for the forecast months (other rows are ignored).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_future: Option<MacroPanel>,
    /// Forecast ages `0..=max_age`; defaults to the oldest fitted age.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_age: Option<u32>,
    /// Also report `g^-1(theta)` (pointwise, no retransformation correction).
    #[serde(default)]
    pub original_scale: bool,
}

impl ForecastSpec {
    pub fn new(horizon_months: u32) -> Self {
        ForecastSpec {
            horizon_months,
            maturity_tail: MaturityTail::HoldLast,
            vintage_mode: VintageMode::RecentLevel { window: DEFAULT_WINDOW },
            macro_future: None,
            max_age: None,
            original_scale: false,
        }
    }

    /// Build from flat parameters: `tail` is `hold-last` or `straight-line`
    /// (needs `tail_a_star`), `vintage` is `recent-level`, `ar1` or
    /// `override` (needs `values`).
    pub fn from_parts(
        horizon_months: u32,
        tail: &str,
        tail_a_star: Option<u32>,
        vintage: &str,
        window: Option<usize>,
        values: Option<Vec<f64>>,
    ) -> Result<Self> {
        let maturity_tail = match tail {
            "hold-last" => MaturityTail::HoldLast,
            "straight-line" => MaturityTail::StraightLine {
                a_star: tail_a_star.ok_or_else(|| EmvError::InvalidSpec("straight-line tail needs A*".into()))?,
            },
            other => return Err(EmvError::InvalidSpec(format!("unknown maturity tail {other:?}"))),
        };
        let vintage_mode = match vintage {
            "recent-level" => VintageMode::RecentLevel {
                window: window.unwrap_or(DEFAULT_WINDOW),
            },
            "ar1" => VintageMode::Ar1,
            "override" => VintageMode::Override {
                values: values.ok_or_else(|| EmvError::InvalidSpec("override vintage mode needs values".into()))?,
            },
            other => return Err(EmvError::InvalidSpec(format!("unknown vintage mode {other:?}"))),
        };
        Ok(ForecastSpec {
            maturity_tail,
            vintage_mode,
            ..ForecastSpec::new(horizon_months)
        })
    }
}

/// Anything a forecast may start from. There is deliberately no variant for
/// an unconstrained minimum-norm fit.
#[derive(Debug, Clone, Copy)]
pub enum ForecastSource<'a> {
    Decomposition {
        decomposition: &'a Decomposition,
        transform: ResponseTransform,
        /// Observed `(age, time)` cells of the fit it came from.
        cells: &'a [(u32, u32)],
    },
    Semiparametric(&'a SemiparametricFit),
    RandomEffects(&'a RandomEffectsFit),
}

impl ForecastSource<'_> {
    fn name(&self) -> &'static str {
        match self {
            ForecastSource::Decomposition { .. } => "decomposition",
            ForecastSource::Semiparametric(_) => "semiparametric",
            ForecastSource::RandomEffects(_) => "random-effects",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastCell {
    pub age: u32,
    pub time: u32,
    pub vintage: i64,
    pub theta_hat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_hat: Option<f64>,
    /// Maturity effect came from the tail rule or interpolation.
    pub age_extrapolated: bool,
    /// Vintage effect came from the vintage rule or interpolation.
    pub vintage_projected: bool,
}

impl ForecastCell {
    /// Both the age and the vintage lie outside the fitted levels; the two
    /// extrapolations are simply added.
    pub fn doubly_extrapolated(&self) -> bool {
        self.age_extrapolated && self.vintage_projected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub source: String,
    pub spec: ForecastSpec,
    pub cells: Vec<ForecastCell>,
}

impl Forecast {
    /// `age,time,vintage,theta_hat[,y_hat]`.
    pub fn to_csv_string(&self) -> String {
        let with_y = self.spec.original_scale;
        let mut out = String::from(if with_y {
            "age,time,vintage,theta_hat,y_hat\n"
        } else {
            "age,time,vintage,theta_hat\n"
        });
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{}", c.age, c.time, c.vintage, c.theta_hat));
            if with_y {
                out.push_str(&format!(",{}", c.y_hat.unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn get(&self, age: u32, time: u32) -> Option<&ForecastCell> {
        self.cells.iter().find(|c| c.age == age && c.time == time)
    }
}

/// Maturity effects at `target_ages`: fitted values where available,
/// otherwise the tail rule.
pub fn extrapolate_maturity(decomp: &Decomposition, tail: &MaturityTail, target_ages: &[u32]) -> Result<Vec<f64>> {
    let rule = TailRule::new(&decomp.maturity, tail)?;
    Ok(target_ages.iter().map(|&a| rule.at(&decomp.maturity, a).0).collect())
}

struct TailRule {
    last_age: u32,
    last: f64,
    line: Option<(f64, f64)>,
}

impl TailRule {
    fn new(maturity: &[AgeEffect], tail: &MaturityTail) -> Result<Self> {
        let last = maturity.last().ok_or(EmvError::InsufficientData)?;
        let line = match tail {
            MaturityTail::HoldLast => None,
            MaturityTail::StraightLine { a_star } => {
                let pts: Vec<&AgeEffect> = maturity.iter().filter(|e| e.age > *a_star).collect();
                if pts.len() < 2 {
                    return Err(EmvError::InsufficientTail {
                        a_star: *a_star,
                        found: pts.len(),
                    });
                }
                let xs: Vec<f64> = pts.iter().map(|e| e.age as f64).collect();
                let ys: Vec<f64> = pts.iter().map(|e| e.value).collect();
                let slope = ols_slope(&xs, &ys);
                let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
                let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
                Some((ybar - slope * xbar, slope))
            }
        };
        Ok(TailRule {
            last_age: last.age,
            last: last.value,
            line,
        })
    }

    /// Effect at `age` and whether it was extrapolated.
    fn at(&self, maturity: &[AgeEffect], age: u32) -> (f64, bool) {
        if let Some(e) = maturity.iter().find(|e| e.age == age) {
            return (e.value, false);
        }
        if age > self.last_age {
            return match self.line {
                Some((a0, b)) => (a0 + b * age as f64, true),
                None => (self.last, true),
            };
        }
        let pts: Vec<(f64, f64)> = maturity.iter().map(|e| (e.age as f64, e.value)).collect();
        (interpolate(&pts, age as f64), true)
    }
}

/// Piecewise-linear interpolation, constant beyond the ends.
fn interpolate(pts: &[(f64, f64)], x: f64) -> f64 {
    if x <= pts[0].0 {
        return pts[0].1;
    }
    for w in pts.windows(2) {
        if x <= w[1].0 {
            let f = (x - w[0].0) / (w[1].0 - w[0].0);
            return w[0].1 + f * (w[1].1 - w[0].1);
        }
    }
    pts[pts.len() - 1].1
}

enum Exogenous {
    Hold(Vec<TimeEffect>),
    Macro {
        names: Vec<String>,
        coefs: Vec<f64>,
        /// `E(t) - x_t b` on the fitted times.
        offset: f64,
        fitted: Vec<TimeEffect>,
    },
}

struct Effects<'a> {
    intercept: f64,
    maturity: &'a [AgeEffect],
    vintage: &'a [VintageEffect],
    exogenous: Exogenous,
    cells: Vec<(u32, u32)>,
    transform: ResponseTransform,
}

fn offset_between(fitted: &[TimeEffect], implied: &[TimeEffect]) -> f64 {
    let n = fitted.len().min(implied.len()).max(1);
    fitted.iter().zip(implied).map(|(f, i)| f.value - i.value).sum::<f64>() / n as f64
}

fn effects<'a>(source: &ForecastSource<'a>) -> Result<Effects<'a>> {
    Ok(match *source {
        ForecastSource::Decomposition {
            decomposition,
            transform,
            cells,
        } => {
            if decomposition.constraint.is_none() {
                return Err(EmvError::InvalidSpec(
                    "forecasting requires an identified decomposition (apply a constraint first)".into(),
                ));
            }
            if let Some(&(a, t)) = cells.iter().find(|&&(a, t)| decomposition.theta(a, t).is_none()) {
                return Err(EmvError::ShapeMismatch(format!(
                    "cell (age={a}, time={t}) is outside the decomposition's levels"
                )));
            }
            Effects {
                intercept: decomposition.intercept,
                maturity: &decomposition.maturity,
                vintage: &decomposition.vintage,
                exogenous: Exogenous::Hold(decomposition.exogenous.clone()),
                cells: cells.to_vec(),
                transform,
            }
        }
        ForecastSource::Semiparametric(fit) => {
            if !fit.full_rank() {
                return Err(EmvError::InvalidSpec("forecasting requires a full-rank semiparametric fit".into()));
            }
            Effects {
                intercept: fit.intercept,
                maturity: &fit.maturity,
                vintage: &fit.vintage,
                exogenous: Exogenous::Macro {
                    names: fit.macro_coefficients.iter().map(|c| c.name.clone()).collect(),
                    coefs: fit.macro_coefficients.iter().map(|c| c.value).collect(),
                    offset: 0.0,
                    fitted: fit.implied_time_effects.clone(),
                },
                cells: fit.cells.clone(),
                transform: fit.transform,
            }
        }
        ForecastSource::RandomEffects(fit) => {
            let d = &fit.decomposition;
            let exogenous = match (&fit.macro_coefficients, &fit.implied_time_effects) {
                (Some(coefs), Some(implied)) => Exogenous::Macro {
                    names: coefs.iter().map(|c| c.name.clone()).collect(),
                    coefs: coefs.iter().map(|c| c.value).collect(),
                    offset: offset_between(&d.exogenous, implied),
                    fitted: d.exogenous.clone(),
                },
                _ => Exogenous::Hold(d.exogenous.clone()),
            };
            Effects {
                intercept: d.intercept,
                maturity: &d.maturity,
                vintage: &d.vintage,
                exogenous,
                cells: fit.cells.clone(),
                transform: fit.transform,
            }
        }
    })
}

/// Effects for vintages after the last fitted one, keyed by vintage.
fn new_vintages(source: &ForecastSource, fx: &Effects, mode: &VintageMode, last_needed: i64) -> Result<BTreeMap<i64, f64>> {
    let last = fx.vintage.last().ok_or(EmvError::InsufficientData)?.vintage;
    let count = (last_needed - last).max(0) as usize;
    let mut out = BTreeMap::new();
    match mode {
        VintageMode::RecentLevel { window } => {
            if *window == 0 {
                return Err(EmvError::EmptyVintageWindow);
            }
            let w = (*window).min(fx.vintage.len());
            let level = fx.vintage[fx.vintage.len() - w..].iter().map(|e| e.value).sum::<f64>() / w as f64;
            for h in 1..=count {
                out.insert(last + h as i64, level);
            }
        }
        VintageMode::Override { values } => {
            if values.len() < count {
                return Err(EmvError::InvalidSpec(format!(
                    "vintage override has {} values but the forecast needs {count}",
                    values.len()
                )));
            }
            for (h, v) in values.iter().take(count).enumerate() {
                out.insert(last + 1 + h as i64, *v);
            }
        }
        VintageMode::Ar1 => {
            let ForecastSource::RandomEffects(fit) = source else {
                return Err(EmvError::InvalidSpec("the ar1 vintage mode needs a random-effects fit".into()));
            };
            if fit.process.kind == ProcessKind::Fixed {
                return Err(EmvError::PredictionRequiresProcess);
            }
            if count == 0 {
                return Ok(out);
            }
            // predictions live on the process scale; the reported vintage block
            // differs from it by an affine function of the vintage index
            let last_blup = fit.blup.last().map(|b| b.value).unwrap_or(0.0);
            let preds = fit.process.predict(last_blup, count)?;
            let xs: Vec<f64> = fit.blup.iter().map(|b| b.vintage as f64).collect();
            let ds: Vec<f64> = fit
                .blup
                .iter()
                .zip(fx.vintage)
                .map(|(b, e)| e.value - b.value)
                .collect();
            let slope = ols_slope(&xs, &ds);
            let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
            let dbar = ds.iter().sum::<f64>() / ds.len() as f64;
            for (h, (mean, _)) in preds.into_iter().enumerate() {
                let v = last + 1 + h as i64;
                out.insert(v, mean + dbar + slope * (v as f64 - xbar));
            }
        }
    }
    Ok(out)
}

pub fn forecast(source: ForecastSource, spec: &ForecastSpec) -> Result<Forecast> {
    let fx = effects(&source)?;
    let echo = |cells| Forecast {
        source: source.name().into(),
        spec: spec.clone(),
        cells,
    };
    let tail = TailRule::new(fx.maturity, &spec.maturity_tail)?;
    let last_time = match &fx.exogenous {
        Exogenous::Hold(e) | Exogenous::Macro { fitted: e, .. } => e.last().ok_or(EmvError::InsufficientData)?.time,
    };
    let vintage_pts: Vec<(f64, f64)> = fx.vintage.iter().map(|e| (e.vintage as f64, e.value)).collect();
    let vintage_lookup: BTreeMap<i64, f64> = fx.vintage.iter().map(|e| (e.vintage, e.value)).collect();
    let exo_fitted: BTreeMap<u32, f64> = match &fx.exogenous {
        Exogenous::Hold(e) | Exogenous::Macro { fitted: e, .. } => e.iter().map(|e| (e.time, e.value)).collect(),
    };
    let finish = |age: u32, time: u32, theta: f64, age_x: bool, vin_x: bool| ForecastCell {
        age,
        time,
        vintage: vintage_of(age, time),
        theta_hat: theta,
        y_hat: spec.original_scale.then(|| fx.transform.inverse(theta)),
        age_extrapolated: age_x,
        vintage_projected: vin_x,
    };

    if spec.horizon_months == 0 {
        let cells = fx
            .cells
            .iter()
            .map(|&(a, t)| {
                let theta = fx.intercept
                    + tail.at(fx.maturity, a).0
                    + exo_fitted[&t]
                    + vintage_lookup[&vintage_of(a, t)];
                finish(a, t, theta, false, false)
            })
            .collect();
        return Ok(echo(cells));
    }

    let times: Vec<u32> = (last_time + 1..=last_time + spec.horizon_months).collect();
    let exo_future: Vec<f64> = match &fx.exogenous {
        Exogenous::Hold(e) => vec![e.last().unwrap().value; times.len()],
        Exogenous::Macro {
            names,
            coefs,
            offset,
            ..
        } => {
            let panel = spec.macro_future.as_ref().ok_or_else(|| {
                EmvError::MissingCovariate { time: times[0] }
            })?;
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let panel = panel.select(&names)?;
            times
                .iter()
                .map(|&t| {
                    let row = panel.complete_row(t)?;
                    Ok(row.iter().zip(coefs).map(|(x, b)| x * b).sum::<f64>() + offset)
                })
                .collect::<Result<_>>()?
        }
    };

    let max_age = spec.max_age.unwrap_or(fx.maturity.last().unwrap().age);
    let last_needed = vintage_of(0, *times.last().unwrap());
    let projected = new_vintages(&source, &fx, &spec.vintage_mode, last_needed)?;
    let mut cells = Vec::with_capacity(times.len() * (max_age as usize + 1));
    for (ti, &t) in times.iter().enumerate() {
        for a in 0..=max_age {
            let v = vintage_of(a, t);
            let (m, age_x) = tail.at(fx.maturity, a);
            let (vv, vin_x) = match vintage_lookup.get(&v) {
                Some(&x) => (x, false),
                None => match projected.get(&v) {
                    Some(&x) => (x, true),
                    None => (interpolate(&vintage_pts, v as f64), true),
                },
            };
            cells.push(finish(a, t, fx.intercept + m + exo_future[ti] + vv, age_x, vin_x));
        }
    }
    Ok(echo(cells))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::EmvDesign;
    use crate::estimator::fit_linear;
    use crate::identify::{apply_constraint, ConstraintSpec};
    use crate::semiparametric::fit_semiparametric;
    use crate::synth::{generate, ExogenousSource, GeneratorSpec, VintageSource};
    use crate::vintage_effects::{fit_random_effects, ExogenousHandling};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn decomposition(maturity: Vec<f64>) -> Decomposition {
        Decomposition {
            constraint: Some(ConstraintSpec::Intrinsic),
            gamma_applied: 0.0,
            intercept: 0.0,
            maturity: maturity
                .into_iter()
                .enumerate()
                .map(|(a, value)| AgeEffect {
                    age: a as u32,
                    value,
                    se: None,
                })
                .collect(),
            exogenous: vec![TimeEffect {
                time: 1,
                value: 0.0,
                se: None,
            }],
            vintage: vec![VintageEffect {
                vintage: 1,
                value: 0.0,
                se: None,
            }],
        }
    }

    #[test]
    fn straight_line_continues_a_linear_tail() {
        let m: Vec<f64> = (0..=24).map(|a| if a <= 12 { 0.5 } else { 0.5 - 0.01 * (a - 12) as f64 }).collect();
        let d = decomposition(m);
        let out = extrapolate_maturity(&d, &MaturityTail::StraightLine { a_star: 12 }, &[20, 25, 30, 36]).unwrap();
        for (a, x) in [20, 25, 30, 36].iter().zip(out) {
            assert!((x - (0.5 - 0.01 * (*a - 12) as f64)).abs() < 1e-12);
        }
        let held = extrapolate_maturity(&d, &MaturityTail::HoldLast, &[25, 30, 40]).unwrap();
        assert!(held.iter().all(|x| *x == d.maturity[24].value));
        assert!(matches!(
            extrapolate_maturity(&d, &MaturityTail::StraightLine { a_star: 23 }, &[30]),
            Err(EmvError::InsufficientTail { a_star: 23, found: 1 })
        ));
    }

    #[test]
    fn noisy_tail_slope_within_sampling_error() {
        // slope SE for 24 unit-spaced points with sd 0.005 is about 1.4e-4
        let noise = Normal::new(0.0, 0.005).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<f64> = (0..=36)
                .map(|a| if a <= 12 { 0.0 } else { -0.01 * (a - 12) as f64 + noise.sample(&mut rng) })
                .collect();
            let d = decomposition(m);
            let out = extrapolate_maturity(&d, &MaturityTail::StraightLine { a_star: 12 }, &[100, 101]).unwrap();
            assert!((out[1] - out[0] + 0.01).abs() < 0.005);
        }
    }

    fn semi_setup(coefficients: Vec<f64>) -> (crate::synth::Generated, SemiparametricFit) {
        let g = generate(&GeneratorSpec {
            exogenous: ExogenousSource::Macro { coefficients },
            ..Default::default()
        })
        .unwrap();
        let history = g.macros.as_ref().unwrap();
        let fit = fit_semiparametric(&g.grid, history, &ResponseTransform::identity()).unwrap();
        (g, fit)
    }

    #[test]
    fn horizon_zero_reproduces_fitted_values() {
        let (g, semi) = semi_setup(vec![0.5, -0.3]);
        let f = forecast(ForecastSource::Semiparametric(&semi), &ForecastSpec::new(0)).unwrap();
        assert_eq!(f.cells.len(), semi.fitted.len());
        for (c, y) in f.cells.iter().zip(&semi.fitted) {
            assert!((c.theta_hat - y).abs() < 1e-10);
        }
        let design = EmvDesign::build(&g.grid).unwrap();
        let fit = fit_linear(&design, &g.grid, &ResponseTransform::identity()).unwrap();
        let d = apply_constraint(&fit, &design, &ConstraintSpec::maturity_slope(0.0, 12)).unwrap();
        let f = forecast(
            ForecastSource::Decomposition {
                decomposition: &d,
                transform: ResponseTransform::identity(),
                cells: &fit.cells,
            },
            &ForecastSpec::new(0),
        )
        .unwrap();
        for (c, y) in f.cells.iter().zip(&fit.fitted) {
            assert!((c.theta_hat - y).abs() < 1e-10);
        }
    }

    #[test]
    fn one_month_ahead_uses_fitted_structure() {
        let (g, semi) = semi_setup(vec![0.5, -0.3]);
        let spec = ForecastSpec {
            macro_future: g.macros.clone(),
            vintage_mode: VintageMode::RecentLevel { window: 3 },
            ..ForecastSpec::new(1)
        };
        let f = forecast(ForecastSource::Semiparametric(&semi), &spec).unwrap();
        let level = semi.vintage[semi.vintage.len() - 3..].iter().map(|e| e.value).sum::<f64>() / 3.0;
        let e85 = semi.macro_effect(g.macros.as_ref().unwrap(), 85).unwrap();
        assert_eq!(f.cells.len(), 25);
        for c in &f.cells {
            assert_eq!(c.time, 85);
            let v = if c.age == 0 { level } else { semi.vintage_at(c.vintage).unwrap() };
            let expected = semi.intercept + semi.maturity_at(c.age).unwrap() + e85 + v;
            assert!((c.theta_hat - expected).abs() < 1e-12);
            assert_eq!(c.vintage_projected, c.age == 0);
            assert!(!c.age_extrapolated);
        }
    }

    #[test]
    fn zero_macro_coefficients_give_flat_forecasts() {
        let (g, mut semi) = semi_setup(vec![0.5, -0.3]);
        for c in semi.macro_coefficients.iter_mut() {
            c.value = 0.0;
        }
        let spec = ForecastSpec {
            macro_future: g.macros.clone(),
            ..ForecastSpec::new(12)
        };
        let f = forecast(ForecastSource::Semiparametric(&semi), &spec).unwrap();
        // fixed age and vintage means two different times only for projected vintages
        let a = f.get(3, 90).unwrap();
        let b = f.get(5, 92).unwrap();
        assert_eq!(a.vintage, b.vintage);
        let at = |c: &ForecastCell| c.theta_hat - semi.maturity_at(c.age).unwrap();
        assert!((at(a) - at(b)).abs() < 1e-12);
    }

    #[test]
    fn missing_future_covariates_name_the_time() {
        let (g, semi) = semi_setup(vec![0.5, -0.3]);
        let short = g.macros.as_ref().unwrap().select(&["unemployment_yoy", "debt_to_income"]).unwrap();
        let rows: Vec<Vec<f64>> = (1..=90).map(|t| short.row(t).unwrap().to_vec()).collect();
        let short = MacroPanel::new(short.names().to_vec(), (1..=90).collect(), rows).unwrap();
        let spec = ForecastSpec {
            macro_future: Some(short),
            ..ForecastSpec::new(12)
        };
        let err = forecast(ForecastSource::Semiparametric(&semi), &spec).unwrap_err();
        assert!(matches!(err, EmvError::MissingCovariate { time: 91 }), "{err}");
    }

    #[test]
    fn spec_from_flat_parameters() {
        let s = ForecastSpec::from_parts(6, "straight-line", Some(12), "override", None, Some(vec![0.1])).unwrap();
        assert_eq!(s.maturity_tail, MaturityTail::StraightLine { a_star: 12 });
        assert_eq!(s.vintage_mode, VintageMode::Override { values: vec![0.1] });
        assert!(ForecastSpec::from_parts(6, "straight-line", None, "ar1", None, None).is_err());
        assert!(ForecastSpec::from_parts(6, "hold-last", None, "override", None, None).is_err());
        assert_eq!(
            ForecastSpec::from_parts(6, "hold-last", None, "recent-level", None, None).unwrap(),
            ForecastSpec::new(6)
        );
    }

    #[test]
    fn refuses_unidentified_decomposition_and_empty_window() {
        let mut d = decomposition(vec![0.0, 0.1, 0.2]);
        let src = ForecastSource::Decomposition {
            decomposition: &d,
            transform: ResponseTransform::identity(),
            cells: &[],
        };
        let spec = ForecastSpec {
            vintage_mode: VintageMode::RecentLevel { window: 0 },
            ..ForecastSpec::new(2)
        };
        assert!(matches!(forecast(src, &spec), Err(EmvError::EmptyVintageWindow)));
        d.constraint = None;
        let src = ForecastSource::Decomposition {
            decomposition: &d,
            transform: ResponseTransform::identity(),
            cells: &[],
        };
        assert!(matches!(forecast(src, &ForecastSpec::new(2)), Err(EmvError::InvalidSpec(_))));
    }

    #[test]
    fn synthetic_forecast_error_within_twice_residual_scale() {
        let (g, semi) = semi_setup(vec![0.5, -0.3]);
        let spec = ForecastSpec {
            macro_future: g.macros.clone(),
            maturity_tail: MaturityTail::StraightLine { a_star: 12 },
            vintage_mode: VintageMode::RecentLevel { window: 12 },
            ..ForecastSpec::new(12)
        };
        let f = forecast(ForecastSource::Semiparametric(&semi), &spec).unwrap();
        let mae = f
            .cells
            .iter()
            .map(|c| (c.theta_hat - g.effects.theta(c.age, c.time).unwrap()).abs())
            .sum::<f64>()
            / f.cells.len() as f64;
        let in_sample = semi.sigma2.sqrt();
        assert!(mae <= 2.0 * in_sample, "mae {mae}, residual {in_sample}");
    }

    #[test]
    fn ar1_mode_from_random_effects() {
        let g = generate(&GeneratorSpec {
            vintage: VintageSource::Ar1 { rho: 0.8, sigma2: 0.0155 },
            ..Default::default()
        })
        .unwrap();
        let spec_c = ConstraintSpec::maturity_slope(0.0, 12);
        let fit = fit_random_effects(&g.grid, &ResponseTransform::identity(), ProcessKind::Ar1, &ExogenousHandling::Nonparametric(spec_c)).unwrap();
        let spec = ForecastSpec {
            vintage_mode: VintageMode::Ar1,
            max_age: Some(30),
            original_scale: true,
            ..ForecastSpec::new(6)
        };
        let f = forecast(ForecastSource::RandomEffects(&fit), &spec).unwrap();
        assert_eq!(f.cells.len(), 6 * 31);
        // the projected vintage block at horizon h decays toward the affine map of 0
        let d = &fit.decomposition;
        let last = fit.blup.last().unwrap();
        let lastv = d.vintage.last().unwrap();
        let c85 = f.get(0, 85).unwrap();
        let e84 = d.exogenous_at(84).unwrap();
        let m0 = d.maturity_at(0).unwrap();
        let v85 = c85.theta_hat - d.intercept - e84 - m0;
        let offset_slope = {
            let a = &d.vintage[d.vintage.len() - 2];
            let b = &fit.blup[fit.blup.len() - 2];
            (lastv.value - last.value) - (a.value - b.value)
        };
        let expected = fit.process.rho * last.value + (lastv.value - last.value) + offset_slope;
        assert!((v85 - expected).abs() < 1e-9, "{v85} vs {expected}");
        assert!(!f.get(30, 90).unwrap().doubly_extrapolated());
        assert!(f.cells.iter().all(|c| !c.doubly_extrapolated()));
        assert!(f.get(26, 85).unwrap().age_extrapolated);
        assert!(f.cells.iter().all(|c| c.y_hat == Some(c.theta_hat)));
        let csv = f.to_csv_string();
        assert!(csv.starts_with("age,time,vintage,theta_hat,y_hat\n"));
        assert_eq!(csv.lines().count(), 1 + 6 * 31);
        let back: Forecast = serde_json::from_str(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
    }
}
