//! Vintage effects as random effects (iid normal or stationary AR(1)).
//!
//! The model is `g(Y) = X_F b + Z u + e` with `e ~ N(0, s2 W^-1)` and
//! `u ~ N(0, s2 * tau * Q(rho)^-1)`, where `Z` holds vintage indicators and
//! `Q` is the AR(1) precision with unit innovation variance (the identity
//! for iid). `X_F` carries the intercept, maturity indicators and either time
//! indicators or macro covariates. The variance ratio `tau = sigma2_V / s2`
//! and `rho` maximise the restricted likelihood; everything per evaluation
//! works on the `q x q` Schur complement of the mixed-model equations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::design::{EmvDesign, Layout};
use crate::error::{EmvError, Result};
use crate::identify::{reidentify, ConstraintSpec, Decomposition, TimeEffect, VintageEffect};
use crate::panel::{PanelGrid, ResponseTransform};
use crate::semiparametric::{MacroCoefficient, MacroPanel};

/// Minimum number of observed vintages for variance-component estimation.
pub const MIN_VINTAGES: usize = 8;
/// Search range for `ln tau`.
pub const LOG_TAU_RANGE: (f64, f64) = (-15.0, 10.0);
/// Search range for `rho`.
pub const RHO_RANGE: (f64, f64) = (-0.95, 0.95);
const LOG_TAU_STEP: f64 = 1.0;
const RHO_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    Fixed,
    IidNormal,
    Ar1,
}

impl std::str::FromStr for ProcessKind {
    type Err = EmvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(ProcessKind::Fixed),
            "iid" | "iid-normal" => Ok(ProcessKind::IidNormal),
            "ar1" => Ok(ProcessKind::Ar1),
            other => Err(EmvError::InvalidSpec(format!("unknown vintage process {other:?}"))),
        }
    }
}

/// Vintage process with its (estimated) parameters. For AR(1) `sigma2_v`
/// is the innovation variance and the first vintage starts from the
/// stationary law `N(0, sigma2_v / (1 - rho^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VintageProcess {
    pub kind: ProcessKind,
    #[serde(rename = "sigma2_V")]
    pub sigma2_v: f64,
    pub rho: f64,
}

/// How the exogenous block enters the random-effects model.
#[derive(Debug, Clone, PartialEq)]
pub enum ExogenousHandling {
    /// Time indicators; the reported decomposition satisfies the constraint.
    Nonparametric(ConstraintSpec),
    /// Regression on macro covariates.
    Macro(MacroPanel),
}

/// Overrides for the variance-parameter search.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReOptions {
    /// Evaluate at this `ln tau` instead of searching.
    pub log_tau: Option<f64>,
    /// Evaluate at this `rho` instead of searching (AR(1) only).
    pub rho: Option<f64>,
}

/// Per-vintage shrinkage. Given the other vintages at their predicted values,
/// the predicted effect is a weighted average of `conditional_fixed` (what the
/// data alone say about this vintage) and `conditional_mean` (what the process
/// says), with weight `factor` on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageEntry {
    pub vintage: i64,
    pub n_cells: usize,
    /// Data-identified part of the fixed-effect estimate.
    pub fixed: f64,
    /// Data-identified part of the predicted effect.
    pub shrunk: f64,
    pub conditional_mean: f64,
    pub conditional_fixed: f64,
    /// `|predicted - conditional_mean| / |conditional_fixed - conditional_mean|`.
    pub ratio: Option<f64>,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectsFit {
    pub process: VintageProcess,
    /// Residual variance on the transformed scale.
    pub sigma2: f64,
    /// `sigma2_V / sigma2` at the optimum.
    pub tau: f64,
    pub complete_shrinkage: bool,
    /// `-2 log L_R` up to an additive constant.
    pub reml_criterion: f64,
    pub decomposition: Decomposition,
    /// Fixed-effect vintage fit under the same exogenous handling and constraint.
    pub fixed_decomposition: Decomposition,
    /// Predicted random effects on their own (zero prior mean) scale, with
    /// prediction standard errors.
    pub blup: Vec<VintageEffect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_coefficients: Option<Vec<MacroCoefficient>>,
    /// `sum_j x_tj b_j` per observed time, before centring (macro handling only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implied_time_effects: Option<Vec<TimeEffect>>,
    pub shrinkage: Vec<ShrinkageEntry>,
    pub r_squared: f64,
    pub transform: ResponseTransform,
    pub cells: Vec<(u32, u32)>,
    pub fitted: Vec<f64>,
}

impl RandomEffectsFit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// AR(1) precision over (possibly gapped) vintage levels, in units of the
/// innovation variance, with `ln |Q|`.
pub fn ar1_precision(vintages: &[i64], rho: f64) -> (DMatrix<f64>, f64) {
    let q = vintages.len();
    let mut m = DMatrix::zeros(q, q);
    if rho == 0.0 {
        return (DMatrix::identity(q, q), 0.0);
    }
    // u_1 ~ N(0, 1 / (1 - rho^2)), u_k | u_{k-1} ~ N(phi u_{k-1}, (1 - phi^2) / (1 - rho^2))
    let scale = 1.0 - rho * rho;
    m[(0, 0)] += scale;
    let mut logdet = q as f64 * scale.ln();
    for k in 1..q {
        let phi = rho.powi((vintages[k] - vintages[k - 1]) as i32);
        let s = scale / (1.0 - phi * phi);
        m[(k, k)] += s;
        m[(k - 1, k - 1)] += s * phi * phi;
        m[(k, k - 1)] -= s * phi;
        m[(k - 1, k)] -= s * phi;
        logdet -= (1.0 - phi * phi).ln();
    }
    (m, logdet)
}

/// Sufficient statistics of the mixed-model equations after absorbing `b`.
struct Absorbed {
    n: usize,
    p: usize,
    vintages: Vec<i64>,
    n_cells: Vec<usize>,
    /// Diagonal of `Z^T W Z`.
    d_diag: Vec<f64>,
    chol_a: Cholesky<f64, Dyn>,
    b: DMatrix<f64>,
    r_f: DVector<f64>,
    /// `D - B^T A^-1 B`.
    d_tilde: DMatrix<f64>,
    /// `r_V - B^T A^-1 r_F`.
    r_tilde: DVector<f64>,
    /// `y^T W y - r_F^T A^-1 r_F`.
    s0: f64,
    x_f: DMatrix<f64>,
    vin_idx: Vec<usize>,
    y: DVector<f64>,
    w: Vec<f64>,
}

impl Absorbed {
    fn build(x_f: DMatrix<f64>, vin_idx: Vec<usize>, vintages: Vec<i64>, y: DVector<f64>, w: Vec<f64>) -> Result<Self> {
        let (n, p) = x_f.shape();
        let q = vintages.len();
        if n <= p {
            return Err(EmvError::InsufficientData);
        }
        let mut xw = x_f.clone();
        for i in 0..n {
            xw.row_mut(i).scale_mut(w[i]);
        }
        let a = x_f.transpose() * &xw;
        let chol_a = Cholesky::new(a).ok_or_else(|| {
            EmvError::RankDeficientCovariates {
                columns: vec!["fixed-effect design is singular".into()],
            }
        })?;
        let mut b = DMatrix::zeros(p, q);
        let mut d = DMatrix::zeros(q, q);
        let mut r_v = DVector::zeros(q);
        let mut n_cells = vec![0usize; q];
        for i in 0..n {
            let k = vin_idx[i];
            for j in 0..p {
                b[(j, k)] += xw[(i, j)];
            }
            d[(k, k)] += w[i];
            r_v[k] += w[i] * y[i];
            n_cells[k] += 1;
        }
        let r_f = xw.transpose() * &y;
        let a_inv_b = chol_a.solve(&b);
        let a_inv_r = chol_a.solve(&r_f);
        let d_tilde = &d - b.transpose() * &a_inv_b;
        let d_tilde = (&d_tilde + d_tilde.transpose()) * 0.5;
        let r_tilde = &r_v - b.transpose() * &a_inv_r;
        let yw: f64 = y.iter().zip(&w).map(|(y, w)| w * y * y).sum();
        let s0 = yw - r_f.dot(&a_inv_r);
        Ok(Absorbed {
            n,
            p,
            vintages,
            n_cells,
            d_diag: d.diagonal().iter().copied().collect(),
            chol_a,
            b,
            r_f,
            d_tilde,
            r_tilde,
            s0,
            x_f,
            vin_idx,
            y,
            w,
        })
    }

    fn precision(&self, kind: ProcessKind, rho: f64) -> (DMatrix<f64>, f64) {
        match kind {
            ProcessKind::Ar1 => ar1_precision(&self.vintages, rho),
            _ => (DMatrix::identity(self.vintages.len(), self.vintages.len()), 0.0),
        }
    }

    /// `-2 log L_R` (constants dropped) at `(ln tau, rho)`.
    fn criterion(&self, kind: ProcessKind, log_tau: f64, rho: f64) -> f64 {
        let tau = log_tau.exp();
        let (qm, logdet_q) = self.precision(kind, rho);
        let s = &self.d_tilde + qm / tau;
        let Some(chol) = Cholesky::new(s) else {
            return f64::NAN;
        };
        let logdet_s: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let ypy = self.s0 - self.r_tilde.dot(&chol.solve(&self.r_tilde));
        let dof = (self.n - self.p) as f64;
        if ypy <= 0.0 {
            return f64::NAN;
        }
        dof * (ypy / dof).ln() + self.vintages.len() as f64 * log_tau - logdet_q + logdet_s
    }
}

fn golden(f: &mut dyn FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Grid then golden-section refinement inside one grid step of the best point.
fn grid_then_golden(f: &mut dyn FnMut(f64) -> f64, lo: f64, hi: f64, step: f64, tol: f64) -> (f64, f64) {
    let n = ((hi - lo) / step).round() as usize;
    let mut best = (lo, f64::INFINITY);
    for i in 0..=n {
        let x = lo + step * i as f64;
        let v = f(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    let (x, v) = golden(f, (best.0 - step).max(lo), (best.0 + step).min(hi), tol);
    if v < best.1 {
        (x, v)
    } else {
        best
    }
}

type Trace = Vec<(f64, f64, f64)>;

/// Search `(ln tau, rho)`; returns the optimum and its criterion value.
fn search(abs: &Absorbed, kind: ProcessKind, opts: &ReOptions) -> Result<(f64, f64, f64)> {
    let mut trace: Trace = Vec::new();
    let mut bad = false;
    let mut eval = |lt: f64, rho: f64, trace: &mut Trace| {
        let v = abs.criterion(kind, lt, rho);
        trace.push((lt, rho, v));
        if !v.is_finite() {
            bad = true;
            f64::INFINITY
        } else {
            v
        }
    };
    let mut inner = |rho: f64, trace: &mut Trace| -> (f64, f64) {
        match opts.log_tau {
            Some(lt) => (lt, eval(lt, rho, trace)),
            None => grid_then_golden(
                &mut |lt| eval(lt, rho, trace),
                LOG_TAU_RANGE.0,
                LOG_TAU_RANGE.1,
                LOG_TAU_STEP,
                1e-6,
            ),
        }
    };
    let (lt, rho, crit) = match (kind, opts.rho) {
        (ProcessKind::Ar1, None) => {
            let mut cache = std::collections::HashMap::new();
            let mut outer = |rho: f64| {
                let (lt, v) = inner(rho, &mut trace);
                cache.insert(rho.to_bits(), lt);
                v
            };
            let (rho, crit) = grid_then_golden(&mut outer, RHO_RANGE.0, RHO_RANGE.1, RHO_STEP, 1e-5);
            (cache[&rho.to_bits()], rho, crit)
        }
        (ProcessKind::Ar1, Some(rho)) => {
            let (lt, v) = inner(rho, &mut trace);
            (lt, rho, v)
        }
        _ => {
            let (lt, v) = inner(0.0, &mut trace);
            (lt, 0.0, v)
        }
    };
    if bad || !crit.is_finite() {
        let at = trace
            .iter()
            .find(|t| !t.2.is_finite())
            .map(|t| format!("ln tau = {}, rho = {}", t.0, t.1))
            .unwrap_or_else(|| "optimum".into());
        return Err(EmvError::Reml { at, trace });
    }
    Ok((lt, rho, crit))
}

/// Vintage-indicator REML fit with the exogenous block handled as requested.
pub fn fit_random_effects(
    grid: &PanelGrid,
    g: &ResponseTransform,
    kind: ProcessKind,
    handling: &ExogenousHandling,
) -> Result<RandomEffectsFit> {
    fit_random_effects_with(grid, g, kind, handling, &ReOptions::default())
}

pub fn fit_random_effects_with(
    grid: &PanelGrid,
    g: &ResponseTransform,
    kind: ProcessKind,
    handling: &ExogenousHandling,
    opts: &ReOptions,
) -> Result<RandomEffectsFit> {
    let transformed = grid.transform(g)?;
    let cells: Vec<_> = transformed.cells().collect();
    let design = EmvDesign::from_cells(cells.iter().map(|c| (c.age, c.time)))?;
    let layout = design.layout().clone();
    let q = layout.vintages.len();
    if q < MIN_VINTAGES {
        return Err(EmvError::TooFewVintages {
            required: MIN_VINTAGES,
            found: q,
        });
    }
    if let Some(rho) = opts.rho {
        if !(rho.abs() < 1.0) {
            return Err(EmvError::InvalidSpec(format!("rho must lie in (-1, 1), got {rho}")));
        }
    }

    // fixed-effect design: intercept, ages (first dropped), then times
    // (first dropped) or covariates
    let na = layout.ages.len();
    let n = cells.len();
    let (x_f, macro_x) = match handling {
        ExogenousHandling::Nonparametric(_) => {
            let nt = layout.times.len();
            let mut x = DMatrix::zeros(n, na + nt - 1);
            for (i, c) in cells.iter().enumerate() {
                x[(i, 0)] = 1.0;
                let ai = layout.age_col(c.age).unwrap() - layout.age_offset();
                if ai > 0 {
                    x[(i, ai)] = 1.0;
                }
                let ti = layout.time_col(c.time).unwrap() - layout.time_offset();
                if ti > 0 {
                    x[(i, na - 1 + ti)] = 1.0;
                }
            }
            (x, None)
        }
        ExogenousHandling::Macro(m) => {
            let j = m.n_covariates();
            let mut xt = DMatrix::zeros(layout.times.len(), j);
            for (i, &t) in layout.times.iter().enumerate() {
                let row = m.complete_row(t)?;
                for k in 0..j {
                    xt[(i, k)] = row[k];
                }
            }
            let mut x = DMatrix::zeros(n, na + j);
            for (i, c) in cells.iter().enumerate() {
                x[(i, 0)] = 1.0;
                let ai = layout.age_col(c.age).unwrap() - layout.age_offset();
                if ai > 0 {
                    x[(i, ai)] = 1.0;
                }
                let ti = layout.time_col(c.time).unwrap() - layout.time_offset();
                for k in 0..j {
                    x[(i, na + k)] = xt[(ti, k)];
                }
            }
            (x, Some((m.names().to_vec(), xt)))
        }
    };
    let vin_idx: Vec<usize> = cells
        .iter()
        .map(|c| layout.vintage_col(c.vintage()).unwrap() - layout.vintage_offset())
        .collect();
    let y = DVector::from_iterator(n, cells.iter().map(|c| c.value));
    let w: Vec<f64> = cells.iter().map(|c| c.weight).collect();
    let abs = Absorbed::build(x_f, vin_idx, layout.vintages.clone(), y, w)?;

    // variance parameters
    let (log_tau, rho, crit, complete) = if kind == ProcessKind::Fixed {
        (f64::INFINITY, 0.0, f64::NAN, false)
    } else {
        let (lt, rho, crit) = search(&abs, kind, opts)?;
        let complete = opts.log_tau.is_none() && lt <= LOG_TAU_RANGE.0 + 1e-3;
        (lt, rho, crit, complete)
    };

    let fixed_u = pinv_solve(&abs.d_tilde, &abs.r_tilde);
    // s_inv = S^-1 (None for fixed effects), ypy = y^T P y
    let (u, s_inv, qm, ypy) = if kind == ProcessKind::Fixed {
        (fixed_u.clone(), None, None, f64::NAN)
    } else {
        let (qm, _) = abs.precision(kind, rho);
        let s = &abs.d_tilde + &qm / log_tau.exp();
        let chol = Cholesky::new(s).ok_or_else(|| EmvError::Reml {
            at: format!("ln tau = {log_tau}, rho = {rho}"),
            trace: vec![],
        })?;
        let u = chol.solve(&abs.r_tilde);
        let ypy = abs.s0 - abs.r_tilde.dot(&u);
        (u, Some(chol.inverse()), Some(qm / log_tau.exp()), ypy)
    };

    let (beta_f, fitted) = fixed_part(&abs, &u);
    let rss: f64 = abs
        .y
        .iter()
        .zip(fitted.iter())
        .zip(&abs.w)
        .map(|((y, f), w)| w * (y - f).powi(2))
        .sum();
    let sigma2 = match &s_inv {
        Some(_) => ypy / (abs.n - abs.p) as f64,
        None => {
            let rank = crate::linalg::numerical_rank(&abs.d_tilde, 1e-10);
            rss / (abs.n - abs.p - rank) as f64
        }
    };
    let sw: f64 = abs.w.iter().sum();
    let ybar = abs.y.iter().zip(&abs.w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let tss: f64 = abs.y.iter().zip(&abs.w).map(|(y, w)| w * (y - ybar).powi(2)).sum();
    let r_squared = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 1.0 };

    let constraint = match handling {
        ExogenousHandling::Nonparametric(spec) => Some(spec),
        ExogenousHandling::Macro(_) => None,
    };
    let decomposition = assemble(&layout, &beta_f, &u, macro_x.as_ref().map(|m| &m.1), constraint)?;
    let (fixed_beta, _) = fixed_part(&abs, &fixed_u);
    let fixed_decomposition = assemble(&layout, &fixed_beta, &fixed_u, macro_x.as_ref().map(|m| &m.1), constraint)?;

    let (sigma2_v, tau) = match kind {
        ProcessKind::Fixed => (f64::INFINITY, f64::INFINITY),
        _ if complete => (0.0, 0.0),
        _ => (log_tau.exp() * sigma2, log_tau.exp()),
    };
    let blup = layout
        .vintages
        .iter()
        .enumerate()
        .map(|(k, &vintage)| VintageEffect {
            vintage,
            value: u[k],
            se: s_inv.as_ref().map(|s| (sigma2 * s[(k, k)]).sqrt()),
        })
        .collect();

    // unconditional comparison on the part of the vintage block the data identify
    let null = null_projector(&abs.d_tilde);
    let fixed_id = &fixed_u - &null * &fixed_u;
    let shrunk_id = &u - &null * &u;
    let dt = &abs.d_tilde;
    let shrinkage = (0..q)
        .map(|k| {
            let others = |m: &DMatrix<f64>| (0..q).filter(|&l| l != k).map(|l| m[(k, l)] * u[l]).sum::<f64>();
            let (mean, prior) = match &qm {
                Some(p) => (-others(p) / p[(k, k)], p[(k, k)]),
                None => (0.0, 0.0),
            };
            let (cond_fixed, factor) = if dt[(k, k)] > 1e-12 {
                ((abs.r_tilde[k] - others(dt)) / dt[(k, k)], dt[(k, k)] / (dt[(k, k)] + prior))
            } else {
                (mean, 0.0)
            };
            let gap = (cond_fixed - mean).abs();
            ShrinkageEntry {
                vintage: layout.vintages[k],
                n_cells: abs.n_cells[k],
                fixed: fixed_id[k],
                shrunk: shrunk_id[k],
                conditional_mean: mean,
                conditional_fixed: cond_fixed,
                ratio: (gap > 0.0).then(|| (u[k] - mean).abs() / gap),
                factor,
            }
        })
        .collect();

    let macro_coefficients = macro_x.as_ref().map(|(names, _)| {
        // Cov(b) = sigma2 (A - B S^-1 B^T)^-1, with S = diag(Z^T W Z) when unpenalized
        let a = abs.chol_a.l() * abs.chol_a.l().transpose();
        let s_inv = s_inv.clone().unwrap_or_else(|| {
            DMatrix::from_diagonal(&DVector::from_iterator(
                q,
                abs.d_diag.iter().map(|d| 1.0 / d),
            ))
        });
        let m = &a - &abs.b * s_inv * abs.b.transpose();
        let cov = pinv(&m);
        names
            .iter()
            .enumerate()
            .map(|(k, name)| MacroCoefficient {
                name: name.clone(),
                value: beta_f[na + k],
                se: (sigma2 * cov[(na + k, na + k)]).max(0.0).sqrt(),
            })
            .collect()
    });

    let implied_time_effects = macro_x.as_ref().map(|(_, xt)| {
        let implied = xt * beta_f.rows(na, xt.ncols());
        layout
            .times
            .iter()
            .zip(implied.iter())
            .map(|(&time, &value)| TimeEffect { time, value, se: None })
            .collect()
    });

    Ok(RandomEffectsFit {
        process: VintageProcess { kind, sigma2_v, rho },
        sigma2,
        tau,
        complete_shrinkage: complete,
        reml_criterion: crit,
        decomposition,
        fixed_decomposition,
        blup,
        macro_coefficients,
        implied_time_effects,
        shrinkage,
        r_squared,
        transform: *g,
        cells: cells.iter().map(|c| (c.age, c.time)).collect(),
        fitted: fitted.iter().copied().collect(),
    })
}

/// Minimum-norm solution of a symmetric positive semidefinite system.
fn pinv_solve(m: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut out = DVector::zeros(r.len());
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 1e-10 * top {
            let v = eig.eigenvectors.column(k);
            out += v * (v.dot(r) / lam);
        }
    }
    out
}

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix.
fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let q = m.nrows();
    let mut p = DMatrix::zeros(q, q);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 1e-10 * top {
            let v = eig.eigenvectors.column(k);
            p += &v * v.transpose() / lam;
        }
    }
    p
}

/// Orthogonal projector onto the numerical null space of a PSD matrix.
fn null_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let q = m.nrows();
    let mut p = DMatrix::zeros(q, q);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= 1e-10 * top {
            let v = eig.eigenvectors.column(k);
            p += &v * v.transpose();
        }
    }
    p
}

/// Fixed coefficients given vintage effects, and the fitted values.
fn fixed_part(abs: &Absorbed, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let beta = abs.chol_a.solve(&(&abs.r_f - &abs.b * u));
    let mut fitted = &abs.x_f * &beta;
    for (i, f) in fitted.iter_mut().enumerate() {
        *f += u[abs.vin_idx[i]];
    }
    (beta, fitted)
}

/// Full-layout decomposition from the reference-coded fixed part and `u`.
fn assemble(
    layout: &Layout,
    beta_f: &DVector<f64>,
    u: &DVector<f64>,
    macro_x: Option<&DMatrix<f64>>,
    constraint: Option<&ConstraintSpec>,
) -> Result<Decomposition> {
    let na = layout.ages.len();
    let mut beta = DVector::zeros(layout.n_params());
    beta[0] = beta_f[0];
    for k in 1..na {
        beta[layout.age_offset() + k] = beta_f[k];
    }
    match macro_x {
        None => {
            for k in 1..layout.times.len() {
                beta[layout.time_offset() + k] = beta_f[na - 1 + k];
            }
        }
        Some(xt) => {
            let b = beta_f.rows(na, xt.ncols());
            let implied = xt * b;
            for k in 0..layout.times.len() {
                beta[layout.time_offset() + k] = implied[k];
            }
        }
    }
    for k in 0..layout.vintages.len() {
        beta[layout.vintage_offset() + k] = u[k];
    }
    layout.recenter(&mut beta);
    let dec = Decomposition::from_beta(layout, &beta, None, 0.0, None);
    let dec = match constraint {
        Some(spec) => {
            // gamma relative to the minimum-norm representative
            let c = layout.null_vector();
            let mut out = reidentify(&dec, spec)?;
            out.gamma_applied = c.dot(&out.beta()) / c.norm_squared();
            out
        }
        None => dec,
    };
    Ok(dec)
}

impl VintageProcess {
    /// Mean and standard error of the next `horizon` vintage effects given
    /// the last one.
    pub fn predict(&self, last: f64, horizon: usize) -> Result<Vec<(f64, f64)>> {
        if horizon == 0 {
            return Err(EmvError::InvalidSpec("horizon must be at least 1".into()));
        }
        match self.kind {
            ProcessKind::Fixed => Err(EmvError::PredictionRequiresProcess),
            ProcessKind::IidNormal => Ok(vec![(0.0, self.sigma2_v.sqrt()); horizon]),
            ProcessKind::Ar1 => {
                let rho = self.rho;
                Ok((1..=horizon as i32)
                    .map(|h| {
                        let var = self.sigma2_v * (1.0 - rho.powi(2 * h)) / (1.0 - rho * rho);
                        (rho.powi(h) * last, var.sqrt())
                    })
                    .collect())
            }
        }
    }
}

/// Predicted effects (and standard errors) for `horizon` vintages after the
/// last observed one.
pub fn predict_new_vintages(fit: &RandomEffectsFit, horizon: usize) -> Result<Vec<(f64, f64)>> {
    let last = fit.blup.last().map(|e| e.value).unwrap_or(0.0);
    fit.process.predict(last, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::fit_linear;
    use crate::identify::apply_constraint;
    use crate::synth::{generate, GeneratorSpec, MissingPattern, VintageSource};

    fn small(seed: u64, vintage: VintageSource) -> PanelGrid {
        generate(&GeneratorSpec {
            max_age: 3,
            max_time: 14,
            noise_sd: 0.1,
            vintage,
            seed,
            ..Default::default()
        })
        .unwrap()
        .grid
    }

    fn spec() -> ConstraintSpec {
        ConstraintSpec::LastTwoVintagesEqual
    }

    /// Restricted likelihood from the marginal covariance `I + tau Z Sigma Z^T`,
    /// with a differently coded fixed design (last levels dropped).
    fn dense_criterion(grid: &PanelGrid, kind: ProcessKind, log_tau: f64, rho: f64) -> f64 {
        dense(grid, kind, log_tau, rho).0
    }

    /// Criterion and predicted vintage effects `tau Sigma Z^T P y`.
    fn dense(grid: &PanelGrid, kind: ProcessKind, log_tau: f64, rho: f64) -> (f64, DVector<f64>) {
        let cells: Vec<_> = grid.cells().collect();
        let ages: Vec<u32> = cells.iter().map(|c| c.age).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let times: Vec<u32> = cells.iter().map(|c| c.time).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let vins: Vec<i64> = grid.vintages().into_iter().collect();
        let n = cells.len();
        let p = ages.len() + times.len() - 1;
        let mut x = DMatrix::zeros(n, p);
        let mut z = DMatrix::zeros(n, vins.len());
        for (i, c) in cells.iter().enumerate() {
            x[(i, 0)] = 1.0;
            let ai = ages.iter().position(|&a| a == c.age).unwrap();
            if ai + 1 < ages.len() {
                x[(i, 1 + ai)] = 1.0;
            }
            let ti = times.iter().position(|&t| t == c.time).unwrap();
            if ti + 1 < times.len() {
                x[(i, ages.len() + ti)] = 1.0;
            }
            z[(i, vins.iter().position(|&v| v == c.vintage()).unwrap())] = 1.0;
        }
        let q = vins.len();
        let sigma = DMatrix::from_fn(q, q, |k, l| match kind {
            ProcessKind::Ar1 => rho.powi((vins[k] - vins[l]).abs() as i32) / (1.0 - rho * rho),
            _ => (k == l) as u8 as f64,
        });
        let h = DMatrix::identity(n, n) + (&z * &sigma * z.transpose()) * log_tau.exp();
        let hc = Cholesky::new(h).unwrap();
        let logdet_h: f64 = hc.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let hx = hc.solve(&x);
        let xhx = x.transpose() * &hx;
        let xc = Cholesky::new(xhx).unwrap();
        let logdet_x: f64 = xc.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let y = DVector::from_iterator(n, cells.iter().map(|c| c.value));
        let hy = hc.solve(&y);
        let py = &hy - &hx * xc.solve(&(x.transpose() * &hy));
        let dof = (n - p) as f64;
        let blup = sigma * z.transpose() * &py * log_tau.exp();
        (dof * (y.dot(&py) / dof).ln() + logdet_h + logdet_x, blup)
    }

    fn crit_at(grid: &PanelGrid, kind: ProcessKind, lt: f64, rho: f64) -> f64 {
        let opts = ReOptions {
            log_tau: Some(lt),
            rho: (kind == ProcessKind::Ar1).then_some(rho),
        };
        fit_random_effects_with(grid, &ResponseTransform::identity(), kind, &ExogenousHandling::Nonparametric(spec()), &opts)
            .unwrap()
            .reml_criterion
    }

    #[test]
    fn criterion_matches_dense_likelihood_up_to_a_constant() {
        let grid = small(3, VintageSource::Ar1 { rho: 0.6, sigma2: 0.05 });
        let points = [(-3.0, 0.0), (0.0, 0.5), (1.5, -0.4), (-1.0, 0.9)];
        let diffs: Vec<f64> = points
            .iter()
            .map(|&(lt, rho)| crit_at(&grid, ProcessKind::Ar1, lt, rho) - dense_criterion(&grid, ProcessKind::Ar1, lt, rho))
            .collect();
        for d in &diffs {
            assert!((d - diffs[0]).abs() < 1e-7, "{diffs:?}");
        }
        let opts = ReOptions {
            log_tau: Some(0.5),
            rho: Some(0.4),
        };
        let fit = fit_random_effects_with(&grid, &ResponseTransform::identity(), ProcessKind::Ar1, &ExogenousHandling::Nonparametric(spec()), &opts).unwrap();
        let (_, blup) = dense(&grid, ProcessKind::Ar1, 0.5, 0.4);
        for (b, d) in fit.blup.iter().zip(blup.iter()) {
            assert!((b.value - d).abs() < 1e-9, "{} vs {d}", b.value);
        }
    }

    fn grid_argmin(grid: &PanelGrid, kind: ProcessKind) -> (f64, f64) {
        let rhos: Vec<f64> = match kind {
            ProcessKind::Ar1 => (-9..=9).map(|i| i as f64 * 0.1).collect(),
            _ => vec![0.0],
        };
        let mut best = (0.0, 0.0, f64::INFINITY);
        for i in 0..=20 {
            let lt = -6.0 + 0.5 * i as f64;
            for &rho in &rhos {
                let v = dense_criterion(grid, kind, lt, rho);
                if v < best.2 {
                    best = (lt, rho, v);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn reml_optimum_agrees_with_brute_force_grid() {
        for (seed, kind, vintage) in [
            (5, ProcessKind::IidNormal, VintageSource::Iid { sigma2: 0.05 }),
            (6, ProcessKind::Ar1, VintageSource::Ar1 { rho: 0.7, sigma2: 0.05 }),
            (7, ProcessKind::Ar1, VintageSource::Ar1 { rho: -0.3, sigma2: 0.1 }),
        ] {
            let grid = small(seed, vintage);
            let (lt, rho) = grid_argmin(&grid, kind);
            let fit = fit_random_effects(&grid, &ResponseTransform::identity(), kind, &ExogenousHandling::Nonparametric(spec())).unwrap();
            assert!(!fit.complete_shrinkage);
            assert!((fit.tau.ln() - lt).abs() <= 0.5 + 1e-9, "ln tau {} vs grid {lt}", fit.tau.ln());
            assert!((fit.process.rho - rho).abs() <= 0.1 + 1e-9, "rho {} vs grid {rho}", fit.process.rho);
            assert!((fit.process.sigma2_v - fit.tau * fit.sigma2).abs() < 1e-12);
        }
    }

    #[test]
    fn unpenalized_limit_equals_fixed_effects() {
        let g = generate(&GeneratorSpec {
            max_age: 6,
            max_time: 30,
            ..Default::default()
        })
        .unwrap();
        let id = ResponseTransform::identity();
        let opts = ReOptions {
            log_tau: Some(1e8f64.ln()),
            rho: None,
        };
        let re = fit_random_effects_with(&g.grid, &id, ProcessKind::IidNormal, &ExogenousHandling::Nonparametric(spec()), &opts).unwrap();
        let design = EmvDesign::build(&g.grid).unwrap();
        let fixed = apply_constraint(&fit_linear(&design, &g.grid, &id).unwrap(), &design, &spec()).unwrap();
        let (a, b, c) = (re.decomposition.beta(), re.fixed_decomposition.beta(), fixed.beta());
        assert!((&a - &b).amax() < 1e-6);
        assert!((&a - &c).amax() < 1e-6);
        assert!((re.fixed_decomposition.gamma_applied - fixed.gamma_applied).abs() < 1e-6);
    }

    #[test]
    fn shrinkage_properties_on_triangle() {
        let g = generate(&GeneratorSpec::default()).unwrap();
        let fit = fit_random_effects(&g.grid, &ResponseTransform::identity(), ProcessKind::IidNormal, &ExogenousHandling::Nonparametric(spec())).unwrap();
        assert!(fit.process.sigma2_v > 0.0);
        for (e, b) in fit.shrinkage.iter().zip(&fit.blup) {
            let m = e.conditional_mean;
            assert!((b.value - m).abs() <= (e.conditional_fixed - m).abs() + 1e-8, "{e:?}");
            assert!((0.0..=1.0).contains(&e.factor));
        }
        let var = |xs: Vec<f64>| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        assert!(var(fit.shrinkage.iter().map(|e| e.shrunk).collect()) <= var(fit.shrinkage.iter().map(|e| e.fixed).collect()));
        assert!(fit.blup.iter().all(|b| b.se.unwrap() > 0.0));
        let json = fit.to_json().unwrap();
        assert!(json.contains("\"sigma2_V\""));
        assert!(json.contains("\"kind\": \"iid-normal\""));
    }

    #[test]
    fn fewer_cells_shrink_more_on_balanced_panels() {
        for (kind, vintage) in [
            (ProcessKind::IidNormal, VintageSource::Iid { sigma2: 0.0155 }),
            (ProcessKind::Ar1, VintageSource::Ar1 { rho: 0.822, sigma2: 0.0155 }),
        ] {
            let g = generate(&GeneratorSpec {
                missing: MissingPattern::Rectangular,
                vintage,
                ..Default::default()
            })
            .unwrap();
            let fit = fit_random_effects(&g.grid, &ResponseTransform::identity(), kind, &ExogenousHandling::Nonparametric(spec())).unwrap();
            for a in &fit.shrinkage {
                for b in &fit.shrinkage {
                    if a.n_cells < b.n_cells {
                        assert!(a.factor <= b.factor + 1e-12, "{kind:?}: {a:?} {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_vintage_signal_is_complete_shrinkage() {
        // residual noise orthogonal to every indicator leaves nothing for the vintage variance
        let base = generate(&GeneratorSpec {
            max_age: 4,
            max_time: 20,
            noise_sd: 0.0,
            vintage: VintageSource::Explicit { values: vec![0.0; 32] },
            ..Default::default()
        })
        .unwrap();
        let noise = generate(&GeneratorSpec {
            max_age: 4,
            max_time: 20,
            noise_sd: 0.1,
            intercept: 0.0,
            maturity: crate::synth::MaturityShape {
                amplitude: 0.0,
                timescale: 1.0,
                tail_slope: 0.0,
            },
            exogenous: crate::synth::ExogenousSource::Explicit { values: vec![0.0; 32] },
            vintage: VintageSource::Explicit { values: vec![0.0; 32] },
            ..Default::default()
        })
        .unwrap();
        let design = EmvDesign::build(&noise.grid).unwrap();
        let nf = fit_linear(&design, &noise.grid, &ResponseTransform::identity()).unwrap();
        let values: Vec<f64> = base
            .grid
            .cells()
            .zip(nf.response.iter().zip(&nf.fitted))
            .map(|(c, (r, f))| c.value + r - f)
            .collect();
        let grid = base.grid.with_values(&values).unwrap();
        let fit = fit_random_effects(&grid, &ResponseTransform::identity(), ProcessKind::IidNormal, &ExogenousHandling::Nonparametric(spec())).unwrap();
        assert!(fit.complete_shrinkage);
        assert_eq!(fit.process.sigma2_v, 0.0);
        assert!(fit.blup.iter().all(|b| b.value.abs() < 1e-6));
    }

    #[test]
    fn too_few_vintages() {
        let g = generate(&GeneratorSpec {
            max_age: 2,
            max_time: 7,
            missing: MissingPattern::Triangle,
            ..Default::default()
        })
        .unwrap();
        let err = fit_random_effects(&g.grid, &ResponseTransform::identity(), ProcessKind::Ar1, &ExogenousHandling::Nonparametric(spec())).unwrap_err();
        assert!(matches!(err, EmvError::TooFewVintages { required: 8, found: 7 }));
    }

    #[test]
    fn macro_handling_reports_coefficients() {
        let g = generate(&GeneratorSpec {
            exogenous: crate::synth::ExogenousSource::Macro {
                coefficients: vec![0.6, -0.4],
            },
            ..Default::default()
        })
        .unwrap();
        let m = g.macros.unwrap();
        let fit = fit_random_effects(&g.grid, &ResponseTransform::identity(), ProcessKind::IidNormal, &ExogenousHandling::Macro(m)).unwrap();
        let coefs = fit.macro_coefficients.unwrap();
        assert_eq!(coefs.len(), 2);
        for (c, truth) in coefs.iter().zip([0.6, -0.4]) {
            assert!((c.value - truth).abs() < 4.0 * c.se + 0.05, "{c:?}");
        }
        assert!(fit.decomposition.constraint.is_none());
    }

    #[test]
    fn predictions() {
        let iid = VintageProcess {
            kind: ProcessKind::IidNormal,
            sigma2_v: 0.04,
            rho: 0.0,
        };
        assert_eq!(iid.predict(0.3, 3).unwrap(), vec![(0.0, 0.2); 3]);
        let flat = VintageProcess {
            kind: ProcessKind::Ar1,
            ..iid
        };
        for ((m, s), (mi, si)) in flat.predict(0.3, 3).unwrap().into_iter().zip(iid.predict(0.3, 3).unwrap()) {
            assert_eq!(m, mi);
            assert!((s - si).abs() < 1e-15);
        }
        let ar = VintageProcess {
            kind: ProcessKind::Ar1,
            sigma2_v: 0.01,
            rho: 0.8,
        };
        let out = ar.predict(0.1, 2).unwrap();
        assert!((out[1].0 - 0.064).abs() < 1e-15);
        assert!((out[0].1 - 0.1).abs() < 1e-15);
        assert!((out[1].1 - (0.01f64 * (1.0 + 0.64)).sqrt()).abs() < 1e-15);
        assert!(ar.predict(0.1, 0).is_err());
        let fixed = VintageProcess {
            kind: ProcessKind::Fixed,
            ..ar
        };
        assert_eq!(fixed.predict(0.1, 1).unwrap_err().to_string(), "prediction requires a stochastic vintage process");
    }

    #[test]
    fn ar1_precision_inverts_stationary_covariance() {
        let vins = [1, 2, 4, 5, 9];
        let rho: f64 = 0.7;
        let (q, logdet) = ar1_precision(&vins, rho);
        let cov = DMatrix::from_fn(5, 5, |k, l| rho.powi((vins[k] - vins[l]).abs() as i32) / (1.0 - rho * rho));
        assert!((&q * &cov - DMatrix::identity(5, 5)).amax() < 1e-12);
        assert!((logdet - q.determinant().ln()).abs() < 1e-10);
    }
}
