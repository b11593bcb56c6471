//! Dense least-squares helpers shared by the fitting modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{EmvError, Result};

/// Relative singular-value cutoff for the pseudoinverse.
pub const SVD_CUTOFF: f64 = 1e-10;

/// Orthonormal basis (`n x (n-1)`) of the zero-sum subspace of `R^n`
/// (normalised Helmert contrasts).
pub fn helmert_basis(n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n.saturating_sub(1));
    for k in 1..n {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            q[(i, k - 1)] = 1.0 / norm;
        }
        q[(k, k - 1)] = -(k as f64) / norm;
    }
    q
}

/// Minimum-norm weighted least-squares solution from a truncated SVD.
#[derive(Debug, Clone)]
pub struct LsSolution {
    pub coef: DVector<f64>,
    /// `V_r diag(1/s_r)`: `Cov(coef) = sigma^2 * factor * factor^T`.
    pub factor: DMatrix<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

/// Solve `min ||W^{1/2}(y - X b)||` with the smallest `||b||` among minimisers.
pub fn min_norm_wls(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Result<LsSolution> {
    let (n, p) = x.shape();
    if y.len() != n || w.len() != n {
        return Err(EmvError::ShapeMismatch(format!(
            "design has {n} rows, response {} and weights {}",
            y.len(),
            w.len()
        )));
    }
    // Pad with zero rows when short and wide so that V is complete.
    let rows = n.max(p);
    let mut xw = DMatrix::zeros(rows, p);
    let mut yw = DVector::zeros(rows);
    for i in 0..n {
        let s = w[i].sqrt();
        for j in 0..p {
            xw[(i, j)] = x[(i, j)] * s;
        }
        yw[i] = y[i] * s;
    }
    let svd = xw.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    if !(s_max > 0.0) || !s_max.is_finite() {
        return Err(EmvError::ZeroDesign);
    }
    let keep: Vec<usize> = (0..s.len()).filter(|&i| s[i] > SVD_CUTOFF * s_max).collect();
    let uty = u.transpose() * &yw;
    let mut coef = DVector::zeros(p);
    let mut factor = DMatrix::zeros(p, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        let inv = 1.0 / s[i];
        let scale = uty[i] * inv;
        for j in 0..p {
            coef[j] += v_t[(i, j)] * scale;
            factor[(j, col)] = v_t[(i, j)] * inv;
        }
    }
    let mut singular_values: Vec<f64> = s.iter().cloned().collect();
    singular_values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(LsSolution {
        coef,
        factor,
        rank: keep.len(),
        singular_values,
    })
}

/// Right singular vectors spanning the numerical null space of `x`
/// (threshold `tol * s_max`).
pub fn null_space(x: &DMatrix<f64>, tol: f64) -> Vec<DVector<f64>> {
    let (n, p) = x.shape();
    let mut padded = DMatrix::zeros(n.max(p), p);
    padded.view_mut((0, 0), (n, p)).copy_from(x);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    (0..s.len())
        .filter(|&i| s[i] <= tol * s_max)
        .map(|i| v_t.row(i).transpose())
        .collect()
}

/// Numerical rank of `x` with threshold `tol * s_max`.
pub fn numerical_rank(x: &DMatrix<f64>, tol: f64) -> usize {
    let s = x.singular_values();
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    s.iter().filter(|&&v| v > tol * s_max).count()
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    sxy / sxx
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helmert_is_orthonormal_and_zero_sum() {
        for n in 1..7 {
            let q = helmert_basis(n);
            let gram = q.transpose() * &q;
            assert!((gram - DMatrix::identity(n - 1, n - 1)).amax() < 1e-14);
            for j in 0..n - 1 {
                assert!(q.column(j).sum().abs() < 1e-14);
            }
        }
    }

    #[test]
    fn min_norm_solution_of_aliased_columns() {
        // two identical columns: min-norm splits the coefficient evenly
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0]);
        let sol = min_norm_wls(&x, &y, &[1.0; 3]).unwrap();
        assert_eq!(sol.rank, 1);
        assert!((sol.coef[0] - 1.0).abs() < 1e-12 && (sol.coef[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_systems_are_padded() {
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 2.0]);
        let y = DVector::from_vec(vec![9.0]);
        let sol = min_norm_wls(&x, &y, &[1.0]).unwrap();
        // pinv solution is x^T y / |x|^2
        assert!((sol.coef - DVector::from_vec(vec![1.0, 2.0, 2.0])).amax() < 1e-12);
        assert_eq!(null_space(&x, 1e-8).len(), 2);
    }

    #[test]
    fn zero_design_is_rejected() {
        let x = DMatrix::zeros(3, 2);
        let y = DVector::zeros(3);
        assert!(matches!(min_norm_wls(&x, &y, &[1.0; 3]), Err(EmvError::ZeroDesign)));
    }

    #[test]
    fn slope_of_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 - 0.25 * x).collect();
        assert!((ols_slope(&xs, &ys) + 0.25).abs() < 1e-14);
    }
}
