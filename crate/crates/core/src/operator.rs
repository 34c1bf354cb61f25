//! Finite-difference discretization of `(kappa^2 - Laplacian)^(alpha/2)` and
//! assembly of the GMRF precision `P = gamma * L^T L`.

use std::f64::consts::PI;

use statrs::function::gamma::gamma as gamma_fn;

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Entries below this magnitude are dropped from sparse products.
pub const PRUNE_TOL: f64 = 1e-14;

/// Square sparse matrix in compressed-row form with columns sorted per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseOperator {
    /// Build from per-row `(column, value)` lists. Duplicates are summed and
    /// entries with magnitude below [`PRUNE_TOL`] are dropped.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::Dimension { expected: n, got: rows.len() });
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                if c >= n {
                    return Err(Error::Dimension { expected: n, got: c + 1 });
                }
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                if !v.is_finite() {
                    return Err(Error::Parameter(format!("non-finite matrix entry in column {c}")));
                }
                if v.abs() >= PRUNE_TOL {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n, row_ptr, cols, vals })
    }

    /// Build from a row-major dense matrix.
    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n * n {
            return Err(Error::Dimension { expected: n * n, got: dense.len() });
        }
        let rows = (0..n)
            .map(|i| (0..n).filter(|&j| dense[i * n + j] != 0.0).map(|j| (j, dense[i * n + j])).collect())
            .collect();
        Self::from_rows(n, rows)
    }

    pub fn identity(n: usize) -> Self {
        Self { n, row_ptr: (0..=n).collect(), cols: (0..n).collect(), vals: vec![1.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Stored `(column, value)` pairs of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::Dimension { expected: self.n, got: x.len() });
        }
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    /// `y = A x` without allocation. Lengths must equal `dim()`.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                rows[c].push((i, v));
            }
        }
        // Rows are produced in ascending source-row order, hence already sorted.
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut cols = Vec::with_capacity(self.nnz());
        let mut vals = Vec::with_capacity(self.nnz());
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self { n: self.n, row_ptr, cols, vals }
    }

    /// Sparse product `self * other`. Each output entry accumulates its terms in
    /// ascending order of the inner index.
    pub fn matmul(&self, other: &SparseOperator) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::Dimension { expected: self.n, got: other.n });
        }
        let n = self.n;
        let mut acc = vec![0.0; n];
        let mut touched = vec![false; n];
        let mut pattern = Vec::new();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    if !touched[j] {
                        touched[j] = true;
                        pattern.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            pattern.sort_unstable();
            let row: Vec<(usize, f64)> = pattern.iter().map(|&j| (j, acc[j])).collect();
            for &j in &pattern {
                acc[j] = 0.0;
                touched[j] = false;
            }
            pattern.clear();
            rows.push(row);
        }
        Self::from_rows(n, rows)
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Entry-by-entry symmetry check (exact equality).
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v && self.row_has(j, i)))
    }

    fn row_has(&self, i: usize, j: usize) -> bool {
        self.cols[self.row_ptr[i]..self.row_ptr[i + 1]].binary_search(&j).is_ok()
    }

    /// Row-major dense copy. Intended for small problems and tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[i * self.n + j] = v;
            }
        }
        d
    }
}

/// Prior, likelihood and message-passing settings.
///
/// The smoothness `nu = alpha - 1` (two spatial dimensions) and the inverse
/// range `kappa = sqrt(2 nu) / lengthscale` are derived rather than stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    /// SPDE exponent; must be a positive even integer.
    pub alpha: u32,
    pub lengthscale: f64,
    /// Marginal prior variance.
    pub sigma2: f64,
    /// Observation noise variance.
    pub sigma_y2: f64,
    /// Message re-weighting constant.
    pub c: f64,
    /// Damping rate in (0, 1].
    pub eta: f64,
    /// Relative early-stop threshold.
    pub tau: f64,
    pub max_iters: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        let sigma2 = 1.1 * 1.1;
        Self {
            alpha: 2,
            lengthscale: 0.15,
            sigma2,
            sigma_y2: 0.01 * sigma2,
            c: 10.0,
            eta: 0.6,
            tau: 1e-3,
            max_iters: 10_000,
        }
    }
}

impl Hyperparams {
    pub const DIM: u32 = 2;

    pub fn nu(&self) -> f64 {
        self.alpha as f64 - Self::DIM as f64 / 2.0
    }

    pub fn kappa(&self) -> f64 {
        (2.0 * self.nu()).sqrt() / self.lengthscale
    }

    pub fn q(&self) -> f64 {
        compute_q(self.nu(), self.kappa(), Self::DIM)
    }

    /// `gamma = dx dy / (sigma^2 q)` for the given grid.
    pub fn gamma(&self, grid: &GridSpec) -> f64 {
        grid.cell_area() / (self.sigma2 * self.q())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.alpha == 0 || !self.alpha.is_multiple_of(2) {
            return bad(format!("alpha must be a positive even integer, got {}", self.alpha));
        }
        if !(self.lengthscale.is_finite() && self.lengthscale > 0.0) {
            return bad(format!("lengthscale must be positive, got {}", self.lengthscale));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.sigma_y2.is_finite() && self.sigma_y2 > 0.0) {
            return bad(format!("sigma_y2 must be positive, got {}", self.sigma_y2));
        }
        if !self.c.is_finite() || self.c == 0.0 {
            return bad(format!("c must be finite and nonzero, got {}", self.c));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        Ok(())
    }
}

/// Five-point discretization of `kappa^2 - Laplacian`.
pub fn build_shift_operator(grid: &GridSpec, kappa: f64) -> Result<SparseOperator> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::Parameter(format!("kappa must be positive, got {kappa}")));
    }
    let wx = 1.0 / (grid.dx() * grid.dx());
    let wy = 1.0 / (grid.dy() * grid.dy());
    // A 1-wide axis carries no second difference at all.
    let mut diag = kappa * kappa;
    if grid.nx() > 1 {
        diag += 2.0 * wx;
    }
    if grid.ny() > 1 {
        diag += 2.0 * wy;
    }
    let n = grid.len();
    let mut rows = Vec::with_capacity(n);
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            let mut row = Vec::with_capacity(5);
            row.push((grid.linear_index(i, j)?, diag));
            if grid.nx() > 1 {
                for di in [-1, 1] {
                    if let Some(k) = grid.neighbor(i, j, di, 0) {
                        row.push((k, -wx));
                    }
                }
            }
            if grid.ny() > 1 {
                for dj in [-1, 1] {
                    if let Some(k) = grid.neighbor(i, j, 0, dj) {
                        row.push((k, -wy));
                    }
                }
            }
            rows.push(row);
        }
    }
    SparseOperator::from_rows(n, rows)
}

/// `L^p` by repeated sparse products. Powers above two are symmetrized to
/// remove rounding asymmetry between `L^k L` and `L L^k`.
pub fn operator_power(op: &SparseOperator, p: u32) -> Result<SparseOperator> {
    if p == 0 {
        return Err(Error::Parameter("operator power must be positive".into()));
    }
    let mut out = op.clone();
    for _ in 1..p {
        out = out.matmul(op)?;
    }
    if p > 2 {
        let t = out.transpose();
        let n = out.dim();
        let rows = (0..n).map(|i| out.row(i).map(|(j, v)| (j, 0.5 * (v + t.get(i, j)))).collect()).collect();
        out = SparseOperator::from_rows(n, rows)?;
    }
    Ok(out)
}

/// White-noise scaling constant `(4 pi)^(d/2) kappa^(2 nu) Gamma(nu + d/2) / Gamma(nu)`.
pub fn compute_q(nu: f64, kappa: f64, d: u32) -> f64 {
    let half_d = d as f64 / 2.0;
    (4.0 * PI).powf(half_d) * kappa.powf(2.0 * nu) * gamma_fn(nu + half_d) / gamma_fn(nu)
}

/// GMRF precision `gamma * (L^(alpha/2))^T L^(alpha/2)`.
pub fn build_precision(grid: &GridSpec, hyper: &Hyperparams) -> Result<SparseOperator> {
    hyper.validate()?;
    let shift = build_shift_operator(grid, hyper.kappa())?;
    precision_from_shift(&shift, hyper.alpha / 2, hyper.gamma(grid))
}

/// Precision from an already-built shift operator and a folded-in scale.
pub fn precision_from_shift(shift: &SparseOperator, half_alpha: u32, gamma: f64) -> Result<SparseOperator> {
    let root = operator_power(shift, half_alpha)?;
    Ok(root.transpose().matmul(&root)?.scale(gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;

    fn dense_mul(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    c[i * n + j] += a[i * n + k] * b[k * n + j];
                }
            }
        }
        c
    }

    fn chain3() -> SparseOperator {
        let g = GridSpec::new(3, 1, 1.0, 1.0, Boundary::Dirichlet).unwrap();
        build_shift_operator(&g, 1.0).unwrap()
    }

    #[test]
    fn one_dimensional_stencil() {
        let l = chain3();
        assert_eq!(l.to_dense(), vec![3.0, -1.0, 0.0, -1.0, 3.0, -1.0, 0.0, -1.0, 3.0]);
    }

    #[test]
    fn two_dimensional_interior_stencil() {
        let g = GridSpec::new(5, 5, 1.0, 1.0, Boundary::Dirichlet).unwrap();
        let l = build_shift_operator(&g, 2.0).unwrap();
        let c = g.linear_index(2, 2).unwrap();
        let row: Vec<_> = l.row(c).collect();
        assert_eq!(row.len(), 5);
        assert_eq!(l.get(c, c), 8.0);
        for (k, v) in row {
            if k != c {
                assert_eq!(v, -1.0);
            }
        }
    }

    #[test]
    fn anisotropic_spacing() {
        let g = GridSpec::new(4, 4, 0.5, 2.0, Boundary::Dirichlet).unwrap();
        let l = build_shift_operator(&g, 1.0).unwrap();
        let c = g.linear_index(1, 1).unwrap();
        assert_eq!(l.get(c, c), 1.0 + 8.0 + 0.5);
        assert_eq!(l.get(c, c + 1), -4.0);
        assert_eq!(l.get(c, c + 4), -0.25);
    }

    #[test]
    fn periodic_rows_sum_to_kappa_squared() {
        let g = GridSpec::new(4, 4, 1.0, 1.0, Boundary::Periodic).unwrap();
        for kappa in [0.5, 1.0, 3.0] {
            let l = build_shift_operator(&g, kappa).unwrap();
            for i in 0..g.len() {
                let s: f64 = l.row(i).map(|(_, v)| v).sum();
                assert!((s - kappa * kappa).abs() < 1e-12, "row {i} sums to {s}");
            }
        }
    }

    #[test]
    fn shift_operator_exactly_symmetric() {
        for b in [Boundary::Dirichlet, Boundary::Periodic] {
            let g = GridSpec::new(7, 5, 0.3, 0.7, b).unwrap();
            assert!(build_shift_operator(&g, 1.7).unwrap().is_symmetric());
        }
    }

    #[test]
    fn power_one_is_identity_operation() {
        let l = chain3();
        assert_eq!(operator_power(&l, 1).unwrap(), l);
    }

    #[test]
    fn power_two_of_chain() {
        let sq = operator_power(&chain3(), 2).unwrap();
        assert_eq!(sq.to_dense(), vec![10.0, -6.0, 1.0, -6.0, 11.0, -6.0, 1.0, -6.0, 10.0]);
    }

    #[test]
    fn squared_stencil_has_thirteen_point_support() {
        let g = GridSpec::new(7, 7, 1.0, 1.0, Boundary::Dirichlet).unwrap();
        let l = build_shift_operator(&g, 1.0).unwrap();
        let d = l.to_dense();
        let sq = dense_mul(g.len(), &d, &d);
        let c = g.linear_index(3, 3).unwrap();
        let dense_count = (0..g.len()).filter(|&j| sq[c * g.len() + j] != 0.0).count();
        assert_eq!(dense_count, 13);
        assert_eq!(operator_power(&l, 2).unwrap().row_nnz(c), dense_count);
    }

    #[test]
    fn cubed_power_is_symmetric_and_matches_dense() {
        let g = GridSpec::new(6, 5, 0.4, 0.3, Boundary::Dirichlet).unwrap();
        let l = build_shift_operator(&g, 2.3).unwrap();
        let cube = operator_power(&l, 3).unwrap();
        assert!(cube.is_symmetric());
        let d = l.to_dense();
        let n = g.len();
        let oracle = dense_mul(n, &dense_mul(n, &d, &d), &d);
        for (a, b) in cube.to_dense().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn q_examples() {
        assert!((compute_q(1.0, 1.0, 2) - 4.0 * PI).abs() < 1e-12);
        let kappa = 2f64.sqrt() / 0.15;
        let q = compute_q(1.0, kappa, 2);
        assert!((q - 4.0 * PI * kappa * kappa).abs() < 1e-9);
        assert!((q - 1117.01).abs() < 0.01);
        assert!((compute_q(2.0, 1.0, 2) - 8.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn precision_of_chain() {
        let g = GridSpec::new(3, 1, 1.0, 1.0, Boundary::Dirichlet).unwrap();
        let p = precision_from_shift(&build_shift_operator(&g, 1.0).unwrap(), 1, 1.0).unwrap();
        assert_eq!(p.to_dense(), vec![10.0, -6.0, 1.0, -6.0, 11.0, -6.0, 1.0, -6.0, 10.0]);
    }

    #[test]
    fn precision_matches_dense_product() {
        let hyper = Hyperparams::default();
        for b in [Boundary::Dirichlet, Boundary::Periodic] {
            let g = GridSpec::unit_square(16, 16, b).unwrap();
            let p = build_precision(&g, &hyper).unwrap();
            assert!(p.is_symmetric());
            let l = build_shift_operator(&g, hyper.kappa()).unwrap().to_dense();
            let n = g.len();
            let mut lt = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    lt[i * n + j] = l[j * n + i];
                }
            }
            let gamma = hyper.gamma(&g);
            let oracle = dense_mul(n, &lt, &l);
            for (a, b) in p.to_dense().iter().zip(&oracle) {
                assert!((a - gamma * b).abs() <= 1e-12 * (gamma * b).abs().max(1.0));
            }
        }
    }

    #[test]
    fn doubling_variance_halves_precision() {
        let g = GridSpec::unit_square(8, 8, Boundary::Dirichlet).unwrap();
        let h = Hyperparams::default();
        let h2 = Hyperparams { sigma2: 2.0 * h.sigma2, ..h };
        let p = build_precision(&g, &h).unwrap();
        let p2 = build_precision(&g, &h2).unwrap();
        for (a, b) in p.to_dense().iter().zip(p2.to_dense()) {
            assert!((0.5 * a - b).abs() <= 1e-15 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn rejects_odd_alpha() {
        let g = GridSpec::unit_square(8, 8, Boundary::Dirichlet).unwrap();
        let h = Hyperparams { alpha: 3, ..Default::default() };
        assert!(matches!(build_precision(&g, &h), Err(Error::Parameter(_))));
    }

    #[test]
    fn default_hyperparameters() {
        let h = Hyperparams::default();
        assert_eq!(h.alpha, 2);
        assert_eq!(h.nu(), 1.0);
        assert!((h.sigma2 - 1.21).abs() < 1e-12);
        assert_eq!((h.c, h.eta, h.tau, h.max_iters), (10.0, 0.6, 1e-3, 10_000));
        h.validate().unwrap();
    }
}
