//! Rank-deficient estimation of the additive model.
//!
//! Both the linear fit on a transformed response and the IRLS fit of a
//! generalized linear model return the minimum-norm solution inside the
//! zero-sum parameterization (every effect block sums to zero). That
//! solution is orthogonal to the null vector `c`; any identified
//! representation is obtained from it by a shift along `c`
//! (see [`crate::identify`]).
//!
//! Standard errors assume homoscedastic gaussian errors on the transformed
//! scale for the linear fit and unit dispersion for Poisson/binomial fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Block, EmvDesign, Layout};
use crate::error::{EmvError, Result};
use crate::linalg::{min_norm_wls, LsSolution};
use crate::panel::{PanelGrid, ResponseTransform, TransformKind};

/// Error family and canonical link of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianIdentity,
    PoissonLog,
    BinomialLogit,
}

impl Family {
    fn link(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => mu,
            Family::PoissonLog => mu.ln(),
            Family::BinomialLogit => (mu / (1.0 - mu)).ln(),
        }
    }

    fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            Family::PoissonLog => eta.exp(),
            Family::BinomialLogit => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    /// `d mu / d eta`.
    fn mu_eta(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::PoissonLog => mu,
            Family::BinomialLogit => mu * (1.0 - mu),
        }
    }

    fn variance(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::PoissonLog => mu,
            Family::BinomialLogit => mu * (1.0 - mu),
        }
    }

    fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
        match self {
            Family::GaussianIdentity => (y - mu).powi(2),
            Family::PoissonLog => 2.0 * (xlogy(y, mu) - (y - mu)),
            Family::BinomialLogit => 2.0 * (xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu)),
        }
    }

    /// Response transform used to report forecasts on the original scale.
    pub fn reporting_transform(self) -> ResponseTransform {
        match self {
            Family::GaussianIdentity => ResponseTransform::identity(),
            Family::PoissonLog => ResponseTransform::new(TransformKind::Log),
            Family::BinomialLogit => ResponseTransform::new(TransformKind::Logit),
        }
    }
}

/// Result of fitting the nonparametric additive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FitRecord", try_from = "FitRecord")]
pub struct FitResult {
    pub layout: Layout,
    /// Observed `(age, time)` cells in design row order.
    pub cells: Vec<(u32, u32)>,
    /// Minimum-norm coefficients in layout order (blocks sum to zero).
    pub beta: DVector<f64>,
    /// Linear predictor per observed cell (offset excluded).
    pub fitted: Vec<f64>,
    /// Response on the modelling scale per observed cell.
    pub response: Vec<f64>,
    pub weights: Vec<f64>,
    pub residual_ss: f64,
    pub r_squared: f64,
    /// Rank of the model matrix.
    pub rank: usize,
    /// Residual degrees of freedom.
    pub dof: usize,
    /// Dispersion used for standard errors.
    pub sigma2: f64,
    pub family: Family,
    pub transform: ResponseTransform,
    pub iterations: usize,
    /// Null directions beyond `c` detected while solving.
    pub extra_null_dims: usize,
    /// `F` with `Cov(beta) = sigma2 * F F^T`.
    pub cov_factor: DMatrix<f64>,
}

impl FitResult {
    pub fn design(&self) -> Result<EmvDesign> {
        EmvDesign::from_cells(self.cells.iter().copied())
    }

    pub fn null_vector(&self) -> DVector<f64> {
        self.layout.null_vector()
    }

    pub fn n_obs(&self) -> usize {
        self.cells.len()
    }

    /// Standard error of the estimable function `l^T beta`.
    pub fn estimable_se(&self, l: &DVector<f64>) -> Result<f64> {
        estimable_se(self, l)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn check_alignment(design: &EmvDesign, grid: &PanelGrid) -> Result<()> {
    let n = grid.n_observed();
    if n == 0 {
        return Err(EmvError::ZeroDesign);
    }
    if design.n_rows() != n {
        return Err(EmvError::ShapeMismatch(format!(
            "design has {} rows but the grid has {n} observed cells",
            design.n_rows()
        )));
    }
    for (r, c) in design.rows().iter().zip(grid.cells()) {
        if r.age != c.age || r.time != c.time {
            return Err(EmvError::ShapeMismatch(format!(
                "design row (age={}, time={}) does not match grid cell (age={}, time={})",
                r.age, r.time, c.age, c.time
            )));
        }
    }
    Ok(())
}

/// Expected rank of `X` when the only structural deficiency is `c`.
fn expected_rank(layout: &Layout) -> usize {
    layout.n_params() - 4
}


fn solve_reduced(
    design: &EmvDesign,
    basis: &DMatrix<f64>,
    xq: &DMatrix<f64>,
    z: &DVector<f64>,
    w: &[f64],
) -> Result<(DVector<f64>, LsSolution)> {
    let sol = min_norm_wls(xq, z, w)?;
    let beta = basis * &sol.coef;
    debug_assert_eq!(beta.len(), design.n_params());
    Ok((beta, sol))
}

fn weighted_r_squared(y: &[f64], fitted: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let ybar = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let tss: f64 = y.iter().zip(w).map(|(y, w)| w * (y - ybar).powi(2)).sum();
    let rss: f64 = y
        .iter()
        .zip(fitted)
        .zip(w)
        .map(|((y, f), w)| w * (y - f).powi(2))
        .sum();
    let r2 = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 1.0 };
    (rss, r2)
}

/// Weighted least squares on `g(Y)`; the minimum-norm solution.
pub fn fit_linear(design: &EmvDesign, grid: &PanelGrid, g: &ResponseTransform) -> Result<FitResult> {
    check_alignment(design, grid)?;
    let transformed = grid.transform(g)?;
    let y: Vec<f64> = transformed.cells().map(|c| c.value).collect();
    let w: Vec<f64> = transformed.cells().map(|c| c.weight).collect();
    let basis = design.layout().identified_basis();
    let xq = design.reduced_matrix(&basis);
    let (beta, sol) = solve_reduced(design, &basis, &xq, &DVector::from_column_slice(&y), &w)?;
    let fitted: Vec<f64> = design.apply(&beta).iter().copied().collect();
    let (rss, r2) = weighted_r_squared(&y, &fitted, &w);
    let n = y.len();
    let dof = n.saturating_sub(sol.rank);
    let sigma2 = if dof > 0 { rss / dof as f64 } else { 0.0 };
    let extra = expected_rank(design.layout()).saturating_sub(sol.rank);
    if extra > 0 {
        log::warn!("design has {extra} null direction(s) beyond the drift direction c");
    }
    Ok(FitResult {
        layout: design.layout().clone(),
        cells: design.rows().iter().map(|r| (r.age, r.time)).collect(),
        beta,
        fitted,
        response: y,
        weights: w,
        residual_ss: rss,
        r_squared: r2,
        rank: sol.rank,
        dof,
        sigma2,
        family: Family::GaussianIdentity,
        transform: *g,
        iterations: 1,
        extra_null_dims: extra,
        cov_factor: &basis * &sol.factor,
    })
}

/// Maximum IRLS iterations.
pub const IRLS_MAX_ITER: usize = 50;
/// Relative deviance change declaring convergence.
pub const IRLS_TOL: f64 = 1e-10;
/// Coefficient norm treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Linear-predictor span (log scale) at which a converged fit is treated as
/// separated: a fitted probability or rate numerically at the boundary.
pub const BOUNDARY_ETA: f64 = 30.0;

/// Deviance converges while coefficients of separated cells creep towards
/// infinity, so the norm test alone misses separation.
fn at_boundary(family: Family, eta: &[f64]) -> bool {
    match family {
        Family::GaussianIdentity => false,
        Family::BinomialLogit => eta.iter().any(|e| e.abs() > BOUNDARY_ETA),
        Family::PoissonLog => {
            let top = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            eta.iter().any(|e| top - e > BOUNDARY_ETA)
        }
    }
}

/// Iteratively reweighted least squares for a canonical-link GLM.
///
/// For Poisson the grid values are counts; for binomial they are observed
/// proportions with the grid weights acting as trial counts. `offset` is
/// added to the linear predictor (e.g. log exposure) and excluded from the
/// reported fitted values.
pub fn fit_glm(
    design: &EmvDesign,
    grid: &PanelGrid,
    family: Family,
    offset: Option<&[f64]>,
) -> Result<FitResult> {
    check_alignment(design, grid)?;
    let y: Vec<f64> = grid.cells().map(|c| c.value).collect();
    let w: Vec<f64> = grid.cells().map(|c| c.weight).collect();
    let n = y.len();
    let off: Vec<f64> = match offset {
        Some(o) if o.len() != n => {
            return Err(EmvError::ShapeMismatch(format!("offset has {} entries for {n} cells", o.len())))
        }
        Some(o) => o.to_vec(),
        None => vec![0.0; n],
    };
    for (c, &v) in grid.cells().zip(&y) {
        let bad = match family {
            Family::GaussianIdentity => false,
            Family::PoissonLog => v < 0.0,
            Family::BinomialLogit => !(0.0..=1.0).contains(&v),
        };
        if bad {
            return Err(EmvError::InvalidCell {
                age: c.age,
                time: c.time,
                message: format!("value {v} invalid for {family:?}"),
            });
        }
    }

    let basis = design.layout().identified_basis();
    let xq = design.reduced_matrix(&basis);

    let mut mu: Vec<f64> = y
        .iter()
        .zip(&w)
        .map(|(&y, &w)| match family {
            Family::GaussianIdentity => y,
            Family::PoissonLog => y + 0.1,
            Family::BinomialLogit => (w * y + 0.5) / (w + 1.0),
        })
        .collect();
    let mut eta: Vec<f64> = mu.iter().map(|&m| family.link(m)).collect();
    let deviance = |mu: &[f64]| -> f64 {
        y.iter()
            .zip(mu)
            .zip(&w)
            .map(|((&y, &m), &w)| w * family.unit_deviance(y, m))
            .sum()
    };
    let mut dev_old = deviance(&mu);
    let mut trace = vec![dev_old];

    for iter in 1..=IRLS_MAX_ITER {
        let mut z = DVector::zeros(n);
        let mut iw = vec![0.0; n];
        for i in 0..n {
            let d = family.mu_eta(mu[i]);
            z[i] = match family {
                Family::GaussianIdentity => y[i] - off[i],
                _ => eta[i] - off[i] + (y[i] - mu[i]) / d,
            };
            iw[i] = w[i] * d * d / family.variance(mu[i]);
        }
        let (beta, sol) = solve_reduced(design, &basis, &xq, &z, &iw)?;
        let norm = beta.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(EmvError::Separation { norm });
        }
        let lin = design.apply(&beta);
        for i in 0..n {
            eta[i] = lin[i] + off[i];
            mu[i] = family.inverse_link(eta[i]);
        }
        let dev = deviance(&mu);
        trace.push(dev);
        if !dev.is_finite() {
            return Err(EmvError::NonConvergence { iterations: iter, trace });
        }
        if (dev - dev_old).abs() / (dev.abs() + 0.1) < IRLS_TOL {
            if at_boundary(family, &eta) {
                return Err(EmvError::Separation { norm });
            }
            return Ok(finish_glm(design, family, &basis, beta, sol, &y, &w, &off, &mu, dev, iter));
        }
        dev_old = dev;
    }
    Err(EmvError::NonConvergence {
        iterations: IRLS_MAX_ITER,
        trace,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_glm(
    design: &EmvDesign,
    family: Family,
    basis: &DMatrix<f64>,
    beta: DVector<f64>,
    sol: LsSolution,
    y: &[f64],
    w: &[f64],
    off: &[f64],
    mu: &[f64],
    dev: f64,
    iterations: usize,
) -> FitResult {
    let n = y.len();
    let fitted: Vec<f64> = design.apply(&beta).iter().copied().collect();
    let dof = n.saturating_sub(sol.rank);
    let (r_squared, sigma2, response) = match family {
        Family::GaussianIdentity => {
            let yo: Vec<f64> = y.iter().zip(off).map(|(y, o)| y - o).collect();
            let (_, r2) = weighted_r_squared(&yo, &fitted, w);
            (r2, if dof > 0 { dev / dof as f64 } else { 0.0 }, yo)
        }
        _ => {
            // deviance explained relative to the intercept(+offset) model
            let sw: f64 = w.iter().sum();
            let null_mu: Vec<f64> = match family {
                Family::PoissonLog => {
                    let total: f64 = y.iter().zip(w).map(|(y, w)| y * w).sum();
                    let expo: f64 = off.iter().zip(w).map(|(o, w)| o.exp() * w).sum();
                    off.iter().map(|o| o.exp() * total / expo).collect()
                }
                _ => {
                    let m = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
                    vec![m; n]
                }
            };
            let null_dev: f64 = y
                .iter()
                .zip(&null_mu)
                .zip(w)
                .map(|((&y, &m), &w)| w * family.unit_deviance(y, m))
                .sum();
            let r2 = if null_dev > 0.0 { (1.0 - dev / null_dev).clamp(0.0, 1.0) } else { 1.0 };
            // working response on the link scale, offset removed
            let resp = y
                .iter()
                .zip(mu)
                .zip(&fitted)
                .map(|((&y, &m), &f)| f + (y - m) / family.mu_eta(m))
                .collect();
            (r2, 1.0, resp)
        }
    };
    let extra = expected_rank(design.layout()).saturating_sub(sol.rank);
    FitResult {
        layout: design.layout().clone(),
        cells: design.rows().iter().map(|r| (r.age, r.time)).collect(),
        beta,
        fitted,
        response,
        weights: w.to_vec(),
        residual_ss: dev,
        r_squared,
        rank: sol.rank,
        dof,
        sigma2,
        family,
        transform: family.reporting_transform(),
        iterations,
        extra_null_dims: extra,
        cov_factor: basis * sol.factor,
    }
}

/// Relative tolerance on `|l^T c|` for estimability.
pub const ESTIMABILITY_TOL: f64 = 1e-8;

/// Standard error of `l^T beta_hat`; `l` must be orthogonal to `c`.
pub fn estimable_se(fit: &FitResult, l: &DVector<f64>) -> Result<f64> {
    if l.len() != fit.beta.len() {
        return Err(EmvError::ShapeMismatch(format!(
            "functional has {} entries, layout has {}",
            l.len(),
            fit.beta.len()
        )));
    }
    let c = fit.null_vector();
    let component = l.dot(&c);
    let scale = l.norm() * c.norm();
    if component.abs() > ESTIMABILITY_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(EmvError::NotEstimable { component });
    }
    Ok(fit.sigma2.sqrt() * (fit.cov_factor.transpose() * l).norm())
}

// ---------------------------------------------------------------------------
// JSON form: blocks keyed by level, diagnostics section.

#[derive(Serialize, Deserialize)]
struct LevelValue<L> {
    level: L,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    age: u32,
    time: u32,
    fitted: f64,
    response: f64,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
struct Diagnostics {
    n_obs: usize,
    residual_ss: f64,
    r_squared: f64,
    rank: usize,
    dof: usize,
    sigma2: f64,
    iterations: usize,
    extra_null_dims: usize,
}

#[derive(Serialize, Deserialize)]
struct CovRecord {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FitRecord {
    family: Family,
    transform: ResponseTransform,
    diagnostics: Diagnostics,
    intercept: f64,
    maturity: Vec<LevelValue<u32>>,
    exogenous: Vec<LevelValue<u32>>,
    vintage: Vec<LevelValue<i64>>,
    cells: Vec<CellRecord>,
    cov_factor: CovRecord,
}

impl From<FitResult> for FitRecord {
    fn from(f: FitResult) -> Self {
        let l = &f.layout;
        let block = |b: Block| f.beta.rows(l.block_range(b).start, l.block_range(b).len()).into_owned();
        let m = block(Block::Maturity);
        let e = block(Block::Exogenous);
        let v = block(Block::Vintage);
        FitRecord {
            family: f.family,
            transform: f.transform,
            diagnostics: Diagnostics {
                n_obs: f.cells.len(),
                residual_ss: f.residual_ss,
                r_squared: f.r_squared,
                rank: f.rank,
                dof: f.dof,
                sigma2: f.sigma2,
                iterations: f.iterations,
                extra_null_dims: f.extra_null_dims,
            },
            intercept: f.beta[0],
            maturity: l.ages.iter().zip(m.iter()).map(|(&level, &value)| LevelValue { level, value }).collect(),
            exogenous: l.times.iter().zip(e.iter()).map(|(&level, &value)| LevelValue { level, value }).collect(),
            vintage: l.vintages.iter().zip(v.iter()).map(|(&level, &value)| LevelValue { level, value }).collect(),
            cells: f
                .cells
                .iter()
                .enumerate()
                .map(|(i, &(age, time))| CellRecord {
                    age,
                    time,
                    fitted: f.fitted[i],
                    response: f.response[i],
                    weight: f.weights[i],
                })
                .collect(),
            cov_factor: CovRecord {
                rows: f.cov_factor.nrows(),
                cols: f.cov_factor.ncols(),
                data: f.cov_factor.transpose().iter().copied().collect(),
            },
        }
    }
}

impl TryFrom<FitRecord> for FitResult {
    type Error = EmvError;

    fn try_from(r: FitRecord) -> Result<Self> {
        let layout = Layout {
            ages: r.maturity.iter().map(|x| x.level).collect(),
            times: r.exogenous.iter().map(|x| x.level).collect(),
            vintages: r.vintage.iter().map(|x| x.level).collect(),
        };
        let mut beta = vec![r.intercept];
        beta.extend(r.maturity.iter().map(|x| x.value));
        beta.extend(r.exogenous.iter().map(|x| x.value));
        beta.extend(r.vintage.iter().map(|x| x.value));
        if r.cov_factor.data.len() != r.cov_factor.rows * r.cov_factor.cols || r.cov_factor.rows != beta.len() {
            return Err(EmvError::ShapeMismatch("covariance factor does not match layout".into()));
        }
        let d = r.diagnostics;
        Ok(FitResult {
            layout,
            cells: r.cells.iter().map(|c| (c.age, c.time)).collect(),
            beta: DVector::from_vec(beta),
            fitted: r.cells.iter().map(|c| c.fitted).collect(),
            response: r.cells.iter().map(|c| c.response).collect(),
            weights: r.cells.iter().map(|c| c.weight).collect(),
            residual_ss: d.residual_ss,
            r_squared: d.r_squared,
            rank: d.rank,
            dof: d.dof,
            sigma2: d.sigma2,
            family: r.family,
            transform: r.transform,
            iterations: d.iterations,
            extra_null_dims: d.extra_null_dims,
            cov_factor: DMatrix::from_row_slice(r.cov_factor.rows, r.cov_factor.cols, &r.cov_factor.data),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Cell;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn triangle(max_age: u32, max_time: u32) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for a in 0..=max_age {
            for t in (a + 1)..=max_time {
                out.push((a, t));
            }
        }
        out
    }

    /// Zero-sum coefficients with visible curvature in every block.
    fn truth(layout: &Layout) -> DVector<f64> {
        let mut b = DVector::zeros(layout.n_params());
        b[0] = -2.0;
        for (i, &a) in layout.ages.iter().enumerate() {
            b[layout.age_offset() + i] = 0.4 * (1.0 - (-(a as f64) / 3.0).exp());
        }
        for (i, &t) in layout.times.iter().enumerate() {
            b[layout.time_offset() + i] = 0.2 * (t as f64 / 4.0).sin();
        }
        for (i, &v) in layout.vintages.iter().enumerate() {
            b[layout.vintage_offset() + i] = 0.1 * ((v as f64) / 3.0).cos() + 0.002 * (v as f64).powi(2);
        }
        layout.recenter(&mut b);
        b
    }

    fn grid_from(cells: &[(u32, u32)], values: &[f64], weights: Option<&[f64]>) -> PanelGrid {
        PanelGrid::from_cells(cells.iter().enumerate().map(|(i, &(age, time))| Cell {
            age,
            time,
            value: values[i],
            weight: weights.map_or(1.0, |w| w[i]),
        }))
        .unwrap()
    }

    fn noiseless() -> (EmvDesign, DVector<f64>, PanelGrid) {
        let cells = triangle(6, 14);
        let design = EmvDesign::from_cells(cells.iter().copied()).unwrap();
        let b = truth(design.layout());
        let y: Vec<f64> = design.apply(&b).iter().copied().collect();
        let grid = grid_from(&cells, &y, None);
        (design, b, grid)
    }

    #[test]
    fn exact_data_is_interpolated_by_the_projection() {
        let (design, b, grid) = noiseless();
        let fit = fit_linear(&design, &grid, &ResponseTransform::identity()).unwrap();
        assert!(fit.residual_ss < 1e-20);
        for (f, y) in fit.fitted.iter().zip(&fit.response) {
            assert!((f - y).abs() < 1e-10);
        }
        let c = design.null_vector();
        let projected = &b - c * (c.dot(&b) / c.norm_squared());
        assert!((&fit.beta - projected).amax() < 1e-10);
        assert!(fit.beta.dot(c).abs() < 1e-8 * fit.beta.norm() * c.norm());
        assert_eq!(fit.rank, design.n_params() - 4);
    }

    #[test]
    fn drifted_truth_gives_identical_fit() {
        let (design, b, grid) = noiseless();
        let shifted = &b + design.null_vector() * 3.0;
        let y: Vec<f64> = design.apply(&shifted).iter().copied().collect();
        let cells: Vec<(u32, u32)> = design.rows().iter().map(|r| (r.age, r.time)).collect();
        let other = grid_from(&cells, &y, None);
        let g = ResponseTransform::identity();
        let f1 = fit_linear(&design, &grid, &g).unwrap();
        let f2 = fit_linear(&design, &other, &g).unwrap();
        assert!((f1.beta - f2.beta).amax() < 1e-10);
    }

    fn noisy(seed: u64, sigma: f64) -> (EmvDesign, DVector<f64>, PanelGrid) {
        let (design, b, _) = noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let y: Vec<f64> = design.apply(&b).iter().map(|m| m + noise.sample(&mut rng)).collect();
        let cells: Vec<(u32, u32)> = design.rows().iter().map(|r| (r.age, r.time)).collect();
        let grid = grid_from(&cells, &y, None);
        (design, b, grid)
    }

    #[test]
    fn normal_equations_hold_with_weights() {
        let (design, _, grid) = noisy(7, 0.05);
        let w: Vec<f64> = (0..grid.n_observed()).map(|i| 1.0 + (i % 3) as f64).collect();
        let y: Vec<f64> = grid.cells().map(|c| c.value).collect();
        let cells: Vec<(u32, u32)> = design.rows().iter().map(|r| (r.age, r.time)).collect();
        let grid = grid_from(&cells, &y, Some(&w));
        let fit = fit_linear(&design, &grid, &ResponseTransform::identity()).unwrap();
        let x = design.model_matrix();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w));
        let yv = DVector::from_vec(y);
        let rhs = x.transpose() * &wm * &yv;
        let lhs = x.transpose() * &wm * &x * &fit.beta;
        assert!((lhs - &rhs).norm() <= 1e-8 * rhs.norm());
        assert!((0.0..=1.0).contains(&fit.r_squared));
    }

    #[test]
    fn gaussian_irls_matches_linear_fit() {
        let (design, _, grid) = noisy(11, 0.05);
        let lin = fit_linear(&design, &grid, &ResponseTransform::identity()).unwrap();
        let glm = fit_glm(&design, &grid, Family::GaussianIdentity, None).unwrap();
        assert!((lin.beta - glm.beta).amax() < 1e-10);
        assert!((lin.residual_ss - glm.residual_ss).abs() < 1e-10);
    }

    #[test]
    fn poisson_recovers_truth_modulo_c() {
        let cells = triangle(6, 14);
        let design = EmvDesign::from_cells(cells.iter().copied()).unwrap();
        let b = truth(design.layout());
        let exposure = 1e6_f64;
        let counts: Vec<f64> = design.apply(&b).iter().map(|e| (e.exp() * exposure).round()).collect();
        let grid = grid_from(&cells, &counts, None);
        let offset = vec![exposure.ln(); cells.len()];
        let fit = fit_glm(&design, &grid, Family::PoissonLog, Some(&offset)).unwrap();
        let c = design.null_vector();
        let diff = &fit.beta - &b;
        let gamma = diff.dot(c) / c.norm_squared();
        assert!((diff - c * gamma).amax() < 1e-3);
    }

    #[test]
    fn binomial_half_rates_have_no_effects() {
        let cells = triangle(5, 10);
        let design = EmvDesign::from_cells(cells.iter().copied()).unwrap();
        let grid = grid_from(&cells, &vec![0.5; cells.len()], Some(&vec![40.0; cells.len()]));
        let fit = fit_glm(&design, &grid, Family::BinomialLogit, None).unwrap();
        assert!(fit.beta.amax() < 1e-10);
    }

    #[test]
    fn constant_counts_give_link_of_mean() {
        // full rectangle: c has no intercept component, so the minimum-norm
        // representative of a constant surface has all effects zero
        let cells: Vec<(u32, u32)> = (0..=4).flat_map(|a| (1..=8).map(move |t| (a, t))).collect();
        let design = EmvDesign::from_cells(cells.iter().copied()).unwrap();
        let grid = grid_from(&cells, &vec![12.0; cells.len()], None);
        let fit = fit_glm(&design, &grid, Family::PoissonLog, None).unwrap();
        assert!((fit.beta[0] - 12f64.ln()).abs() < 1e-10);
        assert!(fit.beta.rows(1, fit.beta.len() - 1).amax() < 1e-10);
    }

    #[test]
    fn negative_counts_rejected() {
        let cells = triangle(3, 5);
        let design = EmvDesign::from_cells(cells.iter().copied()).unwrap();
        let mut v = vec![1.0; cells.len()];
        v[2] = -1.0;
        let grid = grid_from(&cells, &v, None);
        assert!(matches!(
            fit_glm(&design, &grid, Family::PoissonLog, None),
            Err(EmvError::InvalidCell { .. })
        ));
    }

    #[test]
    fn separation_is_detected() {
        let cells = triangle(3, 6);
        let design = EmvDesign::from_cells(cells.iter().copied()).unwrap();
        // one age level with all-zero proportions drives its effect to -inf
        let v: Vec<f64> = cells.iter().map(|&(a, _)| if a == 0 { 0.0 } else { 0.5 }).collect();
        let grid = grid_from(&cells, &v, Some(&vec![10.0; cells.len()]));
        let err = fit_glm(&design, &grid, Family::BinomialLogit, None).unwrap_err();
        assert!(matches!(err, EmvError::Separation { .. }), "{err}");
    }

    #[test]
    fn null_direction_is_not_estimable() {
        let (design, _, grid) = noisy(3, 0.05);
        let fit = fit_linear(&design, &grid, &ResponseTransform::identity()).unwrap();
        let err = fit.estimable_se(design.null_vector()).unwrap_err();
        assert!(err.to_string().starts_with("function not estimable: component along null direction"));
        // second difference of time effects is orthogonal to c
        let l = design.layout();
        let mut dd = DVector::zeros(l.n_params());
        dd[l.time_col(4).unwrap()] = 1.0;
        dd[l.time_col(5).unwrap()] = -2.0;
        dd[l.time_col(6).unwrap()] = 1.0;
        assert!(fit.estimable_se(&dd).unwrap() > 0.0);
        let mut first = DVector::zeros(l.n_params());
        first[l.time_col(5).unwrap()] = 1.0;
        first[l.time_col(4).unwrap()] = -1.0;
        assert!(fit.estimable_se(&first).is_err());
    }

    #[test]
    fn cell_se_matches_parametric_bootstrap() {
        let sigma = 0.05;
        let (design, b, _) = noiseless();
        let cells: Vec<(u32, u32)> = design.rows().iter().map(|r| (r.age, r.time)).collect();
        let row = 10;
        let mut l = DVector::zeros(design.n_params());
        for j in [0, design.rows()[row].cols[0], design.rows()[row].cols[1], design.rows()[row].cols[2]] {
            l[j] = 1.0;
        }
        let mean = design.apply(&b);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let noise = Normal::new(0.0, sigma).unwrap();
        let g = ResponseTransform::identity();
        let mut draws = Vec::new();
        let mut ses = Vec::new();
        for _ in 0..1000 {
            let y: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            let fit = fit_linear(&design, &grid_from(&cells, &y, None), &g).unwrap();
            draws.push(fit.fitted[row]);
            ses.push(fit.estimable_se(&l).unwrap());
        }
        let m = draws.iter().sum::<f64>() / 1000.0;
        let sd = (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / 999.0).sqrt();
        let se = ses.iter().sum::<f64>() / 1000.0;
        assert!((se - sd).abs() / sd < 0.1, "se {se} bootstrap {sd}");
        assert!(se <= sigma);
    }

    #[test]
    fn json_round_trip() {
        let (design, _, grid) = noisy(5, 0.05);
        let fit = fit_linear(&design, &grid, &ResponseTransform::identity()).unwrap();
        let text = fit.to_json().unwrap();
        let back = FitResult::from_json(&text).unwrap();
        assert_eq!(back, fit);
        assert!(text.contains("\"diagnostics\""));
    }
}
