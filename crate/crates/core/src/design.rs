//! Model matrix of the additive exogenous/maturity/vintage model.
//!
//! Parameters are laid out as `(intercept; maturity per age level; exogenous
//! per time level; vintage per vintage level)`, one entry per level actually
//! observed. Because `vintage = time - age`, the matrix has an exact null
//! direction `c` that trades a linear drift between the three blocks; it is
//! built analytically from centered level indices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EmvError, Result};
use crate::linalg::{helmert_basis, null_space};
use crate::panel::{vintage_of, PanelGrid};

/// Which effect block a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Intercept,
    Maturity,
    Exogenous,
    Vintage,
}

/// Observed levels of each factor, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub ages: Vec<u32>,
    pub times: Vec<u32>,
    pub vintages: Vec<i64>,
}

impl Layout {
    pub fn n_params(&self) -> usize {
        1 + self.ages.len() + self.times.len() + self.vintages.len()
    }

    pub fn age_offset(&self) -> usize {
        1
    }

    pub fn time_offset(&self) -> usize {
        1 + self.ages.len()
    }

    pub fn vintage_offset(&self) -> usize {
        1 + self.ages.len() + self.times.len()
    }

    pub fn age_col(&self, age: u32) -> Option<usize> {
        self.ages.binary_search(&age).ok().map(|i| i + self.age_offset())
    }

    pub fn time_col(&self, time: u32) -> Option<usize> {
        self.times.binary_search(&time).ok().map(|i| i + self.time_offset())
    }

    pub fn vintage_col(&self, vintage: i64) -> Option<usize> {
        self.vintages
            .binary_search(&vintage)
            .ok()
            .map(|i| i + self.vintage_offset())
    }

    /// Column range of a block.
    pub fn block_range(&self, block: Block) -> std::ops::Range<usize> {
        match block {
            Block::Intercept => 0..1,
            Block::Maturity => self.age_offset()..self.time_offset(),
            Block::Exogenous => self.time_offset()..self.vintage_offset(),
            Block::Vintage => self.vintage_offset()..self.n_params(),
        }
    }

    /// Mean level index of each effect block.
    pub fn centering(&self) -> Centering {
        let m = |xs: &mut dyn Iterator<Item = f64>, n: usize| xs.sum::<f64>() / n as f64;
        Centering {
            age: m(&mut self.ages.iter().map(|&a| a as f64), self.ages.len()),
            time: m(&mut self.times.iter().map(|&t| t as f64), self.times.len()),
            vintage: m(&mut self.vintages.iter().map(|&v| v as f64), self.vintages.len()),
        }
    }

    /// The drift direction `c`: `(a - a_bar)` on ages, `-(t - t_bar)` on
    /// times, `(v - v_bar)` on vintages, and `a_bar - t_bar + v_bar` on the
    /// intercept so that every row of `X c` vanishes.
    pub fn null_vector(&self) -> DVector<f64> {
        let ctr = self.centering();
        let mut c = DVector::zeros(self.n_params());
        c[0] = ctr.age - ctr.time + ctr.vintage;
        for (i, &a) in self.ages.iter().enumerate() {
            c[self.age_offset() + i] = a as f64 - ctr.age;
        }
        for (i, &t) in self.times.iter().enumerate() {
            c[self.time_offset() + i] = -(t as f64 - ctr.time);
        }
        for (i, &v) in self.vintages.iter().enumerate() {
            c[self.vintage_offset() + i] = v as f64 - ctr.vintage;
        }
        c
    }

    /// Orthonormal basis of the parameter subspace where every effect block
    /// sums to zero (`p x (p - 3)`).
    pub fn zero_sum_basis(&self) -> DMatrix<f64> {
        let p = self.n_params();
        let mut q = DMatrix::zeros(p, p - 3);
        q[(0, 0)] = 1.0;
        let mut col = 1;
        for block in [Block::Maturity, Block::Exogenous, Block::Vintage] {
            let range = self.block_range(block);
            let h = helmert_basis(range.len());
            q.view_mut((range.start, col), (range.len(), h.ncols()))
                .copy_from(&h);
            col += h.ncols();
        }
        q
    }

    /// Orthonormal basis (`p x (p - 4)`) of the zero-sum subspace with the
    /// drift direction `c` removed. Solving in this basis leaves no exact
    /// zero singular value behind for the usual designs.
    pub fn identified_basis(&self) -> DMatrix<f64> {
        let q = self.zero_sum_basis();
        let u = (q.transpose() * self.null_vector()).normalize();
        let k = u.len();
        // Householder reflector sending u to +-e1; its other columns span u-perp.
        let mut v = u.clone();
        if u[0] > 0.0 {
            v[0] += 1.0;
        } else {
            v[0] -= 1.0;
        }
        v.normalize_mut();
        let mut h = DMatrix::<f64>::identity(k, k);
        h -= &v * v.transpose() * 2.0;
        q * h.columns(1, k - 1)
    }

    /// Shift each effect block to zero mean, moving the means into the intercept.
    pub fn recenter(&self, beta: &mut DVector<f64>) {
        for block in [Block::Maturity, Block::Exogenous, Block::Vintage] {
            let range = self.block_range(block);
            let n = range.len() as f64;
            let m: f64 = beta.rows(range.start, range.len()).sum() / n;
            for j in range {
                beta[j] -= m;
            }
            beta[0] += m;
        }
    }
}

/// Per-block mean level indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centering {
    pub age: f64,
    pub time: f64,
    pub vintage: f64,
}

/// One model-matrix row: the observed cell and its three indicator columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignRow {
    pub age: u32,
    pub time: u32,
    /// Column indices of the age, time and vintage indicators.
    pub cols: [usize; 3],
}

impl DesignRow {
    pub fn vintage(&self) -> i64 {
        vintage_of(self.age, self.time)
    }
}

/// The EMV model matrix in sparse row form together with its null vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmvDesign {
    layout: Layout,
    rows: Vec<DesignRow>,
    null_vector: DVector<f64>,
}

/// Tolerance of the `||Xc||_inf <= tol * ||X||_inf` verification.
pub const NULL_VECTOR_TOL: f64 = 1e-10;

impl EmvDesign {
    /// Build the design from the observed cells of `grid`.
    pub fn build(grid: &PanelGrid) -> Result<Self> {
        Self::from_cells(grid.cells().map(|c| (c.age, c.time)))
    }

    /// Build the design for an explicit list of `(age, time)` cells, in row order.
    pub fn from_cells<I: IntoIterator<Item = (u32, u32)>>(cells: I) -> Result<Self> {
        let cells: Vec<(u32, u32)> = cells.into_iter().collect();
        if cells.len() < 4 {
            return Err(EmvError::InsufficientData);
        }
        let mut ages: Vec<u32> = cells.iter().map(|c| c.0).collect();
        let mut times: Vec<u32> = cells.iter().map(|c| c.1).collect();
        let mut vintages: Vec<i64> = cells.iter().map(|&(a, t)| vintage_of(a, t)).collect();
        for v in [&mut ages, &mut times] {
            v.sort_unstable();
            v.dedup();
        }
        vintages.sort_unstable();
        vintages.dedup();
        let layout = Layout {
            ages,
            times,
            vintages,
        };
        let rows = cells
            .iter()
            .map(|&(age, time)| DesignRow {
                age,
                time,
                cols: [
                    layout.age_col(age).expect("level present"),
                    layout.time_col(time).expect("level present"),
                    layout.vintage_col(vintage_of(age, time)).expect("level present"),
                ],
            })
            .collect();
        let null_vector = layout.null_vector();
        let design = EmvDesign {
            layout,
            rows,
            null_vector,
        };
        design.verify_null_vector()?;
        Ok(design)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn rows(&self) -> &[DesignRow] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params()
    }

    pub fn centering(&self) -> Centering {
        self.layout.centering()
    }

    /// The canonical (integer-centered) null direction `c`.
    pub fn null_vector(&self) -> &DVector<f64> {
        &self.null_vector
    }

    /// `||X||_inf` (maximum absolute row sum): 4 for every EMV row.
    pub fn norm_inf(&self) -> f64 {
        4.0
    }

    /// `X v` for a parameter vector in layout order.
    pub fn apply(&self, beta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|r| beta[0] + beta[r.cols[0]] + beta[r.cols[1]] + beta[r.cols[2]]),
        )
    }

    /// `X^T v` for a vector over rows.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_params());
        for (r, &x) in self.rows.iter().zip(v.iter()) {
            out[0] += x;
            for &c in &r.cols {
                out[c] += x;
            }
        }
        out
    }

    fn verify_null_vector(&self) -> Result<()> {
        let residual = self.apply(&self.null_vector).amax();
        if residual > NULL_VECTOR_TOL * self.norm_inf() {
            return Err(EmvError::NullVectorCheck { residual });
        }
        Ok(())
    }

    /// Dense model matrix `X` (`n x p`, indicator coding).
    pub fn model_matrix(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.rows.len(), self.n_params());
        for (i, r) in self.rows.iter().enumerate() {
            x[(i, 0)] = 1.0;
            for &c in &r.cols {
                x[(i, c)] = 1.0;
            }
        }
        x
    }

    /// `X Q` where `Q` is [`Layout::zero_sum_basis`].
    pub fn reduced_matrix(&self, basis: &DMatrix<f64>) -> DMatrix<f64> {
        let k = basis.ncols();
        let mut xq = DMatrix::zeros(self.rows.len(), k);
        for (i, r) in self.rows.iter().enumerate() {
            for j in 0..k {
                xq[(i, j)] =
                    basis[(0, j)] + basis[(r.cols[0], j)] + basis[(r.cols[1], j)] + basis[(r.cols[2], j)];
            }
        }
        xq
    }

    /// All null directions of `X` inside the zero-sum subspace, `c` first
    /// (normalised), followed by any further directions caused by missingness.
    pub fn null_directions(&self) -> Vec<DVector<f64>> {
        let c_unit = self.null_vector.normalize();
        let mut out = vec![c_unit.clone()];
        out.extend(self.extra_null_directions());
        out
    }

    /// Null directions beyond `c`, orthogonalised against it.
    pub fn extra_null_directions(&self) -> Vec<DVector<f64>> {
        let q = self.layout.identified_basis();
        let xq = self.reduced_matrix(&q);
        null_space(&xq, 1e-8).into_iter().map(|z| &q * z).collect()
    }

    /// Dense CSV of `X` with a header naming each column.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["age".to_string(), "time".to_string(), "intercept".to_string()];
        header.extend(self.layout.ages.iter().map(|a| format!("M{a}")));
        header.extend(self.layout.times.iter().map(|t| format!("E{t}")));
        header.extend(self.layout.vintages.iter().map(|v| format!("V{v}")));
        let mut out = header.join(",");
        out.push('\n');
        let p = self.n_params();
        for r in &self.rows {
            let mut row = vec![0u8; p];
            row[0] = 1;
            for &c in &r.cols {
                row[c] = 1;
            }
            out.push_str(&format!("{},{}", r.age, r.time));
            for x in row {
                out.push(',');
                out.push(if x == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;
    use crate::panel::Cell;

    fn grid(cells: impl IntoIterator<Item = (u32, u32)>) -> PanelGrid {
        PanelGrid::from_cells(cells.into_iter().map(|(age, time)| Cell {
            age,
            time,
            value: 0.0,
            weight: 1.0,
        }))
        .unwrap()
    }

    fn full(a_max: u32, t_max: u32) -> PanelGrid {
        grid((0..=a_max).flat_map(|a| (1..=t_max).map(move |t| (a, t))))
    }

    #[test]
    fn three_by_three_layout_and_null_vector() {
        let d = EmvDesign::build(&full(2, 3)).unwrap();
        assert_eq!(d.n_rows(), 9);
        assert_eq!(d.n_params(), 1 + 3 + 3 + 5);
        let expected = [0., -1., 0., 1., 1., 0., -1., -2., -1., 0., 1., 2.];
        assert_eq!(d.null_vector().as_slice(), &expected);
        assert!(d.apply(d.null_vector()).amax() <= 1e-10 * d.norm_inf());
    }

    #[test]
    fn too_few_cells() {
        let err = EmvDesign::build(&grid([(0, 1), (0, 2), (1, 2)])).unwrap_err();
        assert_eq!(err.to_string(), "insufficient data for EMV decomposition");
    }

    #[test]
    fn triangle_needs_intercept_component() {
        // no historic vintages: v_bar != t_bar - a_bar
        let d = EmvDesign::build(&grid(
            (0..=3u32).flat_map(|a| (1..=6u32).filter(move |&t| t > a).map(move |t| (a, t))),
        ))
        .unwrap();
        let c = d.null_vector();
        assert!(c[0].abs() > 0.5);
        assert!(d.apply(c).amax() < 1e-12);
    }

    #[test]
    fn raw_null_vector_is_equivalent_modulo_aliasing() {
        // c_raw = (0, a, -t, v) is also annihilated by X, and differs from the
        // centered c by intercept/block-mean aliasing only.
        let g = grid((0..=3u32).flat_map(|a| (1..=6u32).filter(move |&t| t > a).map(move |t| (a, t))));
        let d = EmvDesign::build(&g).unwrap();
        let l = d.layout();
        let mut raw = DVector::zeros(d.n_params());
        for (i, &a) in l.ages.iter().enumerate() {
            raw[l.age_offset() + i] = a as f64;
        }
        for (i, &t) in l.times.iter().enumerate() {
            raw[l.time_offset() + i] = -(t as f64);
        }
        for (i, &v) in l.vintages.iter().enumerate() {
            raw[l.vintage_offset() + i] = v as f64;
        }
        assert!(d.apply(&raw).amax() < 1e-12);
        let mut centered = raw.clone();
        l.recenter(&mut centered);
        assert!((centered - d.null_vector()).amax() < 1e-12);
    }

    #[test]
    fn scaled_null_vector_is_null() {
        let d = EmvDesign::build(&full(3, 5)).unwrap();
        let c2 = d.null_vector() * 2.0;
        assert!(d.apply(&c2).amax() < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_four() {
        // three intercept/factor aliasing directions plus c
        let d = EmvDesign::build(&full(4, 7)).unwrap();
        let x = d.model_matrix();
        assert_eq!(numerical_rank(&x, 1e-8), d.n_params() - 4);
        assert!(d.extra_null_directions().is_empty());
    }

    #[test]
    fn zero_sum_basis_contains_c() {
        let d = EmvDesign::build(&full(3, 4)).unwrap();
        let q = d.layout().zero_sum_basis();
        let c = d.null_vector();
        let proj = &q * (q.transpose() * c);
        assert!((proj - c).amax() < 1e-12);
    }

    #[test]
    fn disconnected_design_reports_extra_direction() {
        // Two blocks of cells that share no age, time or vintage level.
        let mut cells = vec![(0, 1), (0, 2), (1, 2), (1, 3)];
        cells.extend([(10, 30), (10, 31), (11, 31), (11, 32)]);
        let d = EmvDesign::build(&grid(cells)).unwrap();
        assert!(!d.extra_null_directions().is_empty());
        for z in d.null_directions() {
            assert!(d.apply(&z).amax() < 1e-8);
        }
    }

    #[test]
    fn dense_matrix_matches_sparse_apply() {
        let d = EmvDesign::build(&full(2, 4)).unwrap();
        let beta = DVector::from_fn(d.n_params(), |i, _| (i as f64).sin());
        let dense = d.model_matrix() * &beta;
        assert!((dense - d.apply(&beta)).amax() < 1e-14);
        let csv = d.to_csv();
        assert_eq!(csv.lines().count(), 1 + d.n_rows());
    }
}
