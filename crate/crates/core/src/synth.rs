//! Synthetic vintage panels with known effects.
//!
//! `theta(a, t) = b0 + M(a) + E(t) + V(t - a)`, observed with gaussian noise.
//! Effects are drawn for `forecast_months` beyond the panel as well, so the
//! truth can score forecasts.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::design::Layout;
use crate::error::{EmvError, Result};
use crate::identify::Decomposition;
use crate::panel::{vintage_of, Cell, PanelGrid};
use crate::semiparametric::MacroPanel;

/// Saturating maturity curve `amplitude * (1 - exp(-a / timescale)) + tail_slope * a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityShape {
    pub amplitude: f64,
    pub timescale: f64,
    pub tail_slope: f64,
}

impl Default for MaturityShape {
    fn default() -> Self {
        MaturityShape {
            amplitude: 1.0,
            timescale: 4.0,
            tail_slope: -0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExogenousSource {
    /// Mild downward drift, annual seasonality and a recession bump near month 60.
    Default,
    /// One value per time `1..=T + forecast_months`.
    Explicit { values: Vec<f64> },
    /// `E(t) = sum_j x_tj b_j` over a generated two-covariate macro panel.
    Macro { coefficients: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VintageSource {
    /// Values for vintages in ascending order from the first generated vintage.
    Explicit { values: Vec<f64> },
    Iid { sigma2: f64 },
    Ar1 { rho: f64, sigma2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MissingPattern {
    /// Every `(a, t)` with `0 <= a <= A`, `1 <= t <= T` (includes historic vintages).
    Rectangular,
    /// Cells with vintage `t - a >= 1` only.
    Triangle,
    /// Triangle with each cell dropped independently with probability `p`.
    Random { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub max_age: u32,
    pub max_time: u32,
    pub intercept: f64,
    pub maturity: MaturityShape,
    pub exogenous: ExogenousSource,
    pub vintage: VintageSource,
    pub noise_sd: f64,
    pub missing: MissingPattern,
    pub forecast_months: u32,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            max_age: 24,
            max_time: 84,
            intercept: -4.0,
            maturity: MaturityShape::default(),
            exogenous: ExogenousSource::Default,
            vintage: VintageSource::Iid { sigma2: 0.0155 },
            noise_sd: 0.05,
            missing: MissingPattern::Triangle,
            forecast_months: 12,
            seed: 1,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EmvError::InvalidSpec(m.to_string()));
        if self.max_time < 2 {
            return bad("max_time must be at least 2");
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be nonnegative");
        }
        if !(self.maturity.timescale > 0.0) {
            return bad("maturity timescale must be positive");
        }
        match &self.vintage {
            VintageSource::Iid { sigma2 } if !(*sigma2 >= 0.0) => return bad("vintage variance must be nonnegative"),
            VintageSource::Ar1 { rho, sigma2 } => {
                if !(*sigma2 >= 0.0) {
                    return bad("vintage variance must be nonnegative");
                }
                if !(rho.abs() < 1.0) {
                    return bad("AR(1) coefficient must lie in (-1, 1)");
                }
            }
            VintageSource::Explicit { values } if values.len() != self.vintage_range().count() => {
                return bad("explicit vintage values must cover every generated vintage")
            }
            _ => {}
        }
        match &self.exogenous {
            ExogenousSource::Explicit { values } if values.len() != (self.max_time + self.forecast_months) as usize => {
                return bad("explicit exogenous values must cover 1..=T + forecast_months")
            }
            ExogenousSource::Macro { coefficients } if coefficients.len() != 2 => {
                return bad("macro-driven exogenous source takes two coefficients")
            }
            _ => {}
        }
        if let MissingPattern::Random { p } = self.missing {
            if !(0.0..1.0).contains(&p) {
                return bad("missing probability must lie in [0, 1)");
            }
        }
        Ok(())
    }

    fn horizon(&self) -> u32 {
        self.max_time + self.forecast_months
    }

    fn vintage_range(&self) -> std::ops::RangeInclusive<i64> {
        let first = match self.missing {
            MissingPattern::Rectangular => 1 - self.max_age as i64,
            _ => 1,
        };
        first..=self.horizon() as i64
    }
}

/// Effects over the whole generated range (observed and future).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEffects {
    pub intercept: f64,
    /// Indexed by age `0..=A`.
    pub maturity: Vec<f64>,
    /// Indexed by time `1..=T + forecast_months` (position `t - 1`).
    pub exogenous: Vec<f64>,
    pub vintage: BTreeMap<i64, f64>,
}

impl TrueEffects {
    pub fn theta(&self, age: u32, time: u32) -> Option<f64> {
        Some(
            self.intercept
                + self.maturity.get(age as usize)?
                + self.exogenous.get(time.checked_sub(1)? as usize)?
                + self.vintage.get(&vintage_of(age, time))?,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub grid: PanelGrid,
    /// Ground truth over the observed levels, blocks centred.
    pub truth: Decomposition,
    pub macros: Option<MacroPanel>,
    pub effects: TrueEffects,
}

/// Default two-covariate macro panel over `1..=horizon`: a recession-shaped
/// bump and a slow cycle with seeded AR(1) wobble.
fn macro_panel(horizon: u32, rng: &mut ChaCha8Rng) -> MacroPanel {
    let wobble = Normal::new(0.0, 0.02).unwrap();
    let mut e = 0.0;
    let times: Vec<u32> = (1..=horizon).collect();
    let rows = times
        .iter()
        .map(|&t| {
            let t = t as f64;
            e = 0.7 * e + wobble.sample(rng);
            vec![
                0.5 * (-((t - 60.0) / 8.0).powi(2)).exp() + 0.1 * (t / 7.0).sin(),
                0.2 * (t / 11.0).cos() + e,
            ]
        })
        .collect();
    MacroPanel::new(vec!["unemployment_yoy".into(), "debt_to_income".into()], times, rows).expect("valid panel")
}

pub fn generate(spec: &GeneratorSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let horizon = spec.horizon();

    let m = &spec.maturity;
    let maturity: Vec<f64> = (0..=spec.max_age)
        .map(|a| {
            let a = a as f64;
            m.amplitude * (1.0 - (-a / m.timescale).exp()) + m.tail_slope * a
        })
        .collect();

    let vintages: Vec<i64> = spec.vintage_range().collect();
    let vintage_values: Vec<f64> = match &spec.vintage {
        VintageSource::Explicit { values } => values.clone(),
        VintageSource::Iid { sigma2 } => {
            let d = Normal::new(0.0, sigma2.sqrt()).unwrap();
            vintages.iter().map(|_| d.sample(&mut rng)).collect()
        }
        VintageSource::Ar1 { rho, sigma2 } => {
            let innov = Normal::new(0.0, sigma2.sqrt()).unwrap();
            let mut prev = innov.sample(&mut rng) / (1.0 - rho * rho).sqrt();
            let mut out = vec![prev];
            for _ in 1..vintages.len() {
                prev = rho * prev + innov.sample(&mut rng);
                out.push(prev);
            }
            out
        }
    };

    let (exogenous, macros) = match &spec.exogenous {
        ExogenousSource::Default => (
            (1..=horizon)
                .map(|t| {
                    let t = t as f64;
                    -0.002 * t
                        + 0.05 * (2.0 * std::f64::consts::PI * t / 12.0).sin()
                        + 0.25 * (-((t - 60.0) / 9.0).powi(2)).exp()
                })
                .collect(),
            None,
        ),
        ExogenousSource::Explicit { values } => (values.clone(), None),
        ExogenousSource::Macro { coefficients } => {
            let panel = macro_panel(horizon, &mut rng);
            let ex = (1..=horizon)
                .map(|t| {
                    let row = panel.row(t).unwrap();
                    row.iter().zip(coefficients).map(|(x, b)| x * b).sum()
                })
                .collect();
            (ex, Some(panel))
        }
    };

    let mut cells = Vec::new();
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).unwrap();
    let vmap: BTreeMap<i64, f64> = vintages.iter().copied().zip(vintage_values.iter().copied()).collect();
    for a in 0..=spec.max_age {
        for t in 1..=spec.max_time {
            let v = vintage_of(a, t);
            let keep = match spec.missing {
                MissingPattern::Rectangular => true,
                MissingPattern::Triangle => v >= 1,
                MissingPattern::Random { p } => v >= 1 && rng.random::<f64>() >= p,
            };
            if !keep {
                continue;
            }
            let theta = spec.intercept + maturity[a as usize] + exogenous[(t - 1) as usize] + vmap[&v];
            let y = if spec.noise_sd > 0.0 { theta + noise.sample(&mut rng) } else { theta };
            cells.push(Cell {
                age: a,
                time: t,
                value: y,
                weight: 1.0,
            });
        }
    }
    let grid = PanelGrid::from_cells(cells)?;

    // centre each block over the observed levels; the means move into the intercept
    let observed = grid.cells().fold(
        (std::collections::BTreeSet::new(), std::collections::BTreeSet::new(), std::collections::BTreeSet::new()),
        |(mut a, mut t, mut v), c| {
            a.insert(c.age);
            t.insert(c.time);
            v.insert(c.vintage());
            (a, t, v)
        },
    );
    let layout = Layout {
        ages: observed.0.into_iter().collect(),
        times: observed.1.into_iter().collect(),
        vintages: observed.2.into_iter().collect(),
    };
    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| xs.sum::<f64>() / n as f64;
    let mm = mean(&mut layout.ages.iter().map(|&a| maturity[a as usize]), layout.ages.len());
    let me = mean(&mut layout.times.iter().map(|&t| exogenous[(t - 1) as usize]), layout.times.len());
    let mv = mean(&mut layout.vintages.iter().map(|v| vmap[v]), layout.vintages.len());
    let effects = TrueEffects {
        intercept: spec.intercept + mm + me + mv,
        maturity: maturity.iter().map(|x| x - mm).collect(),
        exogenous: exogenous.iter().map(|x| x - me).collect(),
        vintage: vmap.iter().map(|(&k, &x)| (k, x - mv)).collect(),
    };
    let mut beta = vec![effects.intercept];
    beta.extend(layout.ages.iter().map(|&a| effects.maturity[a as usize]));
    beta.extend(layout.times.iter().map(|&t| effects.exogenous[(t - 1) as usize]));
    beta.extend(layout.vintages.iter().map(|v| effects.vintage[v]));
    let truth = Decomposition::from_beta(&layout, &DVector::from_vec(beta), None, 0.0, None);

    Ok(Generated {
        grid,
        truth,
        macros,
        effects,
    })
}
