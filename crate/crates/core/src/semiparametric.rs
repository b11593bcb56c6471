//! Semiparametric fit: the exogenous block is replaced by a regression on
//! macroeconomic covariates, `theta = b0 + M_a + V_v + sum_j x_tj b_j`.
//!
//! With covariates that carry no exact linear time trend the model has full
//! rank and needs no identifiability constraint.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::EmvDesign;
use crate::error::{EmvError, Result};
use crate::estimator::FitResult;
use crate::identify::{apply_constraint, AgeEffect, ConstraintSpec, Decomposition, TimeEffect, VintageEffect};
use crate::linalg::{helmert_basis, min_norm_wls, ols_slope};
use crate::panel::{PanelGrid, ResponseTransform};

/// R^2 of a linear time trend on the covariates above which a warning is logged.
pub const COLLINEARITY_WARN: f64 = 0.95;
/// Relative residual norm under which a covariate counts as linearly dependent.
pub const DEPENDENCE_TOL: f64 = 1e-8;

/// Named macroeconomic covariates indexed by time. Times may extend past the
/// panel (scenario rows for forecasting); missing entries are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPanel {
    names: Vec<String>,
    times: Vec<u32>,
    /// `rows[i][j]` is covariate `j` at `times[i]`.
    rows: Vec<Vec<f64>>,
}

impl MacroPanel {
    pub fn new(names: Vec<String>, times: Vec<u32>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if n.is_empty() || !seen.insert(n.as_str()) {
                return Err(EmvError::InvalidSpec(format!("covariate name {n:?} is empty or duplicated")));
            }
        }
        if times.len() != rows.len() {
            return Err(EmvError::ShapeMismatch(format!("{} times but {} rows", times.len(), rows.len())));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != names.len()) {
            return Err(EmvError::ShapeMismatch(format!(
                "row has {} values for {} covariates",
                r.len(),
                names.len()
            )));
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by_key(|&i| times[i]);
        for w in order.windows(2) {
            if times[w[0]] == times[w[1]] {
                return Err(EmvError::TimeMismatch(format!("time {} appears twice", times[w[0]])));
            }
        }
        Ok(MacroPanel {
            names,
            times: order.iter().map(|&i| times[i]).collect(),
            rows: order.iter().map(|&i| rows[i].clone()).collect(),
        })
    }

    /// Parse `time,<name1>,<name2>,...`; empty fields are missing values.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.is_empty() || !headers[0].eq_ignore_ascii_case("time") {
            return Err(EmvError::Parse {
                row: 1,
                message: "first macro column must be `time`".into(),
            });
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut times = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row_no = i + 2;
            let time: u32 = rec[0].parse().map_err(|_| EmvError::Parse {
                row: row_no,
                message: format!("invalid time {:?}", &rec[0]),
            })?;
            let mut vals = Vec::with_capacity(names.len());
            for j in 0..names.len() {
                let field = rec.get(j + 1).unwrap_or("");
                let v = if field.is_empty() || field.eq_ignore_ascii_case("na") {
                    f64::NAN
                } else {
                    field.parse().map_err(|_| EmvError::Parse {
                        row: row_no,
                        message: format!("invalid value {field:?} for {}", names[j]),
                    })?
                };
                vals.push(v);
            }
            times.push(time);
            rows.push(vals);
        }
        if times.is_empty() {
            return Err(EmvError::NoObservations);
        }
        Self::new(names, times, rows)
    }

    pub fn from_csv_path<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (t, row) in self.times.iter().zip(&self.rows) {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn times(&self) -> &[u32] {
        &self.times
    }

    pub fn n_covariates(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, time: u32) -> Option<&[f64]> {
        self.times.binary_search(&time).ok().map(|i| self.rows[i].as_slice())
    }

    /// Complete (all covariates finite) row at `time`.
    pub fn complete_row(&self, time: u32) -> Result<&[f64]> {
        match self.row(time) {
            Some(r) if r.iter().all(|v| v.is_finite()) => Ok(r),
            _ => Err(EmvError::MissingCovariate { time }),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Keep only the named covariates, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| EmvError::InvalidSpec(format!("unknown covariate {n}")))
            })
            .collect::<Result<_>>()?;
        Self::new(
            idx.iter().map(|&j| self.names[j].clone()).collect(),
            self.times.clone(),
            self.rows.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
        )
    }

    /// Append a derived column computed from an existing one.
    fn derive(&self, source: &str, new_name: String, f: impl Fn(&BTreeMap<u32, f64>, u32) -> f64) -> Result<Self> {
        let col = self
            .column(source)
            .ok_or_else(|| EmvError::InvalidSpec(format!("unknown covariate {source}")))?;
        let by_time: BTreeMap<u32, f64> = self.times.iter().copied().zip(col).collect();
        let mut names = self.names.clone();
        names.push(new_name);
        let rows = self
            .times
            .iter()
            .zip(&self.rows)
            .map(|(&t, r)| {
                let mut r = r.clone();
                r.push(f(&by_time, t));
                r
            })
            .collect();
        Self::new(names, self.times.clone(), rows)
    }

    /// `x_{t-k}`.
    pub fn with_lag(&self, source: &str, k: u32) -> Result<Self> {
        self.derive(source, format!("{source}_lag{k}"), |m, t| {
            t.checked_sub(k).and_then(|s| m.get(&s).copied()).unwrap_or(f64::NAN)
        })
    }

    /// `ln x_t` (NaN for non-positive values).
    pub fn with_log(&self, source: &str) -> Result<Self> {
        self.derive(source, format!("log_{source}"), |m, t| {
            let v = m[&t];
            if v > 0.0 {
                v.ln()
            } else {
                f64::NAN
            }
        })
    }

    /// `x_t - x_{t-period}` (year-on-year change for monthly data with period 12).
    pub fn with_yoy_diff(&self, source: &str, period: u32) -> Result<Self> {
        self.derive(source, format!("{source}_yoy"), |m, t| {
            match t.checked_sub(period).and_then(|s| m.get(&s)) {
                Some(prev) => m[&t] - prev,
                None => f64::NAN,
            }
        })
    }

    /// Trailing mean over `window` periods ending at `t`.
    pub fn with_moving_average(&self, source: &str, window: u32) -> Result<Self> {
        if window == 0 {
            return Err(EmvError::InvalidSpec("moving-average window must be positive".into()));
        }
        self.derive(source, format!("{source}_ma{window}"), |m, t| {
            if t + 1 < window {
                return f64::NAN;
            }
            let vals: Vec<f64> = (t + 1 - window..=t).filter_map(|s| m.get(&s).copied()).collect();
            if vals.len() as u32 == window {
                vals.iter().sum::<f64>() / window as f64
            } else {
                f64::NAN
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroCoefficient {
    pub name: String,
    pub value: f64,
    pub se: f64,
}

/// Result of [`fit_semiparametric`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiparametricFit {
    pub intercept: f64,
    pub maturity: Vec<AgeEffect>,
    pub vintage: Vec<VintageEffect>,
    pub macro_coefficients: Vec<MacroCoefficient>,
    /// `sum_j x_tj b_j` at each fitted time.
    pub implied_time_effects: Vec<TimeEffect>,
    pub r_squared: f64,
    pub residual_ss: f64,
    pub sigma2: f64,
    pub rank: usize,
    pub n_params: usize,
    pub dof: usize,
    /// R^2 of the linear time trend regressed on `[1, covariates]`.
    pub collinearity_diagnostic: f64,
    pub collinearity_warning: bool,
    pub transform: ResponseTransform,
    pub cells: Vec<(u32, u32)>,
    pub fitted: Vec<f64>,
}

impl SemiparametricFit {
    pub fn maturity_at(&self, age: u32) -> Option<f64> {
        self.maturity.iter().find(|e| e.age == age).map(|e| e.value)
    }

    pub fn vintage_at(&self, vintage: i64) -> Option<f64> {
        self.vintage.iter().find(|e| e.vintage == vintage).map(|e| e.value)
    }

    /// `sum_j x_tj b_j` for any time with complete covariates.
    pub fn macro_effect(&self, macros: &MacroPanel, time: u32) -> Result<f64> {
        let row = macros.complete_row(time)?;
        if row.len() != self.macro_coefficients.len() {
            return Err(EmvError::ShapeMismatch("macro panel does not match fitted covariates".into()));
        }
        Ok(row.iter().zip(&self.macro_coefficients).map(|(x, b)| x * b.value).sum())
    }

    pub fn full_rank(&self) -> bool {
        self.rank == self.n_params
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// R^2 of `y` on `[1, xs]` by minimum-norm least squares.
fn r_squared_on(y: &[f64], xs: &DMatrix<f64>) -> Result<f64> {
    let n = y.len();
    let mut x = DMatrix::from_element(n, xs.ncols() + 1, 1.0);
    x.view_mut((0, 1), (n, xs.ncols())).copy_from(xs);
    let yv = DVector::from_column_slice(y);
    let sol = min_norm_wls(&x, &yv, &vec![1.0; n])?;
    let resid = &yv - &x * &sol.coef;
    let ybar = yv.mean();
    let tss: f64 = yv.iter().map(|v| (v - ybar).powi(2)).sum();
    Ok(if tss > 0.0 { (1.0 - resid.norm_squared() / tss).clamp(0.0, 1.0) } else { 1.0 })
}

/// Names of covariates that are linear combinations of the intercept and
/// earlier covariates (modified Gram-Schmidt over the fitting times).
fn dependent_columns(names: &[String], xs: &DMatrix<f64>) -> Vec<String> {
    let n = xs.nrows();
    let mut basis: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0 / (n as f64).sqrt())];
    let mut out = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let col = xs.column(j).into_owned();
        let scale = col.norm().max(f64::MIN_POSITIVE);
        let mut r = col;
        for q in &basis {
            r -= q * q.dot(&r);
        }
        if r.norm() <= DEPENDENCE_TOL * scale {
            out.push(name.clone());
        } else {
            basis.push(r.normalize());
        }
    }
    out
}

/// Weighted least squares of `g(Y)` on intercept, zero-sum maturity and
/// vintage effects, and the covariates.
pub fn fit_semiparametric(grid: &PanelGrid, macros: &MacroPanel, g: &ResponseTransform) -> Result<SemiparametricFit> {
    let transformed = grid.transform(g)?;
    let cells: Vec<_> = transformed.cells().collect();
    if cells.len() < 4 {
        return Err(EmvError::InsufficientData);
    }
    let design = EmvDesign::from_cells(cells.iter().map(|c| (c.age, c.time)))?;
    let layout = design.layout();
    let j_cov = macros.n_covariates();
    if j_cov == 0 {
        return Err(EmvError::InvalidSpec("macro panel has no covariates".into()));
    }

    // covariates over the fitting window
    let mut xs = DMatrix::zeros(layout.times.len(), j_cov);
    for (i, &t) in layout.times.iter().enumerate() {
        let row = macros.complete_row(t)?;
        for j in 0..j_cov {
            xs[(i, j)] = row[j];
        }
    }
    let dependent = dependent_columns(macros.names(), &xs);
    if !dependent.is_empty() {
        return Err(EmvError::RankDeficientCovariates { columns: dependent });
    }
    let trend: Vec<f64> = layout.times.iter().map(|&t| t as f64).collect();
    let collinearity = r_squared_on(&trend, &xs)?;
    let warn = collinearity >= COLLINEARITY_WARN;
    if warn {
        log::warn!(
            "covariates reproduce a linear time trend (R^2 = {collinearity:.4}); maturity/vintage trends are not separately identified"
        );
    }

    let na = layout.ages.len();
    let nv = layout.vintages.len();
    let hm = helmert_basis(na);
    let hv = helmert_basis(nv);
    let p = 1 + (na - 1) + (nv - 1) + j_cov;
    let n = cells.len();
    let mut x = DMatrix::zeros(n, p);
    let time_row: BTreeMap<u32, usize> = layout.times.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    for (i, c) in cells.iter().enumerate() {
        x[(i, 0)] = 1.0;
        let ai = layout.age_col(c.age).unwrap() - layout.age_offset();
        let vi = layout.vintage_col(c.vintage()).unwrap() - layout.vintage_offset();
        for k in 0..na - 1 {
            x[(i, 1 + k)] = hm[(ai, k)];
        }
        for k in 0..nv - 1 {
            x[(i, na + k)] = hv[(vi, k)];
        }
        let ti = time_row[&c.time];
        for j in 0..j_cov {
            x[(i, na + nv - 1 + j)] = xs[(ti, j)];
        }
    }
    let y = DVector::from_iterator(n, cells.iter().map(|c| c.value));
    let w: Vec<f64> = cells.iter().map(|c| c.weight).collect();
    let sol = min_norm_wls(&x, &y, &w)?;
    let fitted = &x * &sol.coef;
    let sw: f64 = w.iter().sum();
    let ybar = y.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let tss: f64 = y.iter().zip(&w).map(|(y, w)| w * (y - ybar).powi(2)).sum();
    let rss: f64 = y.iter().zip(fitted.iter()).zip(&w).map(|((y, f), w)| w * (y - f).powi(2)).sum();
    let r2 = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 1.0 };
    let dof = n.saturating_sub(sol.rank);
    let sigma2 = if dof > 0 { rss / dof as f64 } else { 0.0 };

    let b = &sol.coef;
    let m = &hm * b.rows(1, na - 1);
    let v = &hv * b.rows(na, nv - 1);
    let bm = b.rows(na + nv - 1, j_cov).into_owned();
    let se = |k: usize| (sigma2 * sol.factor.row(k).norm_squared()).sqrt();
    let implied = &xs * &bm;

    Ok(SemiparametricFit {
        intercept: b[0],
        maturity: layout
            .ages
            .iter()
            .zip(m.iter())
            .map(|(&age, &value)| AgeEffect { age, value, se: None })
            .collect(),
        vintage: layout
            .vintages
            .iter()
            .zip(v.iter())
            .map(|(&vintage, &value)| VintageEffect { vintage, value, se: None })
            .collect(),
        macro_coefficients: macros
            .names()
            .iter()
            .enumerate()
            .map(|(j, name)| MacroCoefficient {
                name: name.clone(),
                value: bm[j],
                se: se(na + nv - 1 + j),
            })
            .collect(),
        implied_time_effects: layout
            .times
            .iter()
            .zip(implied.iter())
            .map(|(&time, &value)| TimeEffect { time, value, se: None })
            .collect(),
        r_squared: r2,
        residual_ss: rss,
        sigma2,
        rank: sol.rank,
        n_params: p,
        dof,
        collinearity_diagnostic: collinearity,
        collinearity_warning: warn,
        transform: *g,
        cells: cells.iter().map(|c| (c.age, c.time)).collect(),
        fitted: fitted.iter().copied().collect(),
    })
}

/// Drift to add to the nonparametric exogenous series so that its OLS slope
/// on time matches the implied parametric series:
/// `[sum E*_t (t - t_bar) - sum E_t (t - t_bar)] / sum (t - t_bar)^2`.
pub fn comparable_gamma(np_fit: &FitResult, semi: &SemiparametricFit) -> Result<f64> {
    let (times, np, implied) = aligned_series(np_fit, semi)?;
    Ok(ols_slope(&times, &implied) - ols_slope(&times, &np))
}

fn aligned_series(np_fit: &FitResult, semi: &SemiparametricFit) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let layout = &np_fit.layout;
    let semi_times: Vec<u32> = semi.implied_time_effects.iter().map(|e| e.time).collect();
    if semi_times != layout.times {
        return Err(EmvError::TimeMismatch(format!(
            "nonparametric fit covers times {:?}..{:?} ({} levels), semiparametric fit {} levels",
            layout.times.first(),
            layout.times.last(),
            layout.times.len(),
            semi_times.len()
        )));
    }
    let off = layout.time_offset();
    let np: Vec<f64> = (0..layout.times.len()).map(|i| np_fit.beta[off + i]).collect();
    let times: Vec<f64> = layout.times.iter().map(|&t| t as f64).collect();
    let implied: Vec<f64> = semi.implied_time_effects.iter().map(|e| e.value).collect();
    Ok((times, np, implied))
}

/// The nonparametric decomposition whose exogenous series has the same time
/// drift as the semiparametric implied series.
///
/// The exogenous block of `c` is `-(t - t_bar)`, so adding drift `gamma` to
/// the exogenous series is a shift by `-gamma * c`.
pub fn comparable_nonparametric(np_fit: &FitResult, design: &EmvDesign, semi: &SemiparametricFit) -> Result<Decomposition> {
    let (times, _, implied) = aligned_series(np_fit, semi)?;
    let spec = ConstraintSpec::MatchParametric {
        target_slope: ols_slope(&times, &implied),
    };
    apply_constraint(np_fit, design, &spec)
}

/// Semiparametric fit alongside its comparable nonparametric decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroFitReport {
    pub fit: SemiparametricFit,
    /// Drift added to the minimum-norm exogenous series.
    pub comparable_gamma: f64,
    pub comparable_nonparametric: Decomposition,
}

impl MacroFitReport {
    pub fn new(np_fit: &FitResult, design: &EmvDesign, semi: SemiparametricFit) -> Result<Self> {
        Ok(MacroFitReport {
            comparable_gamma: comparable_gamma(np_fit, &semi)?,
            comparable_nonparametric: comparable_nonparametric(np_fit, design, &semi)?,
            fit: semi,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
