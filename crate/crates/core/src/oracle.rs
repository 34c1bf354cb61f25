//! Ground truth: exact dense posteriors, prior sampling, synthetic
//! experiments and error metrics.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{FactorGraph, ObservationSet};
use crate::grid::{Boundary, GridSpec};
use crate::operator::{build_shift_operator, operator_power, Hyperparams, SparseOperator};

/// Largest problem the dense oracle will factorize.
pub const DENSE_LIMIT: usize = 4096;

/// Independent generator streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    FieldNoise = 0,
    NodeSelection = 1,
    ObservationNoise = 2,
}

/// ChaCha20 generator for `(seed, stream)`. Streams never overlap, so each
/// consumer sees the same numbers regardless of how many others draw first.
pub fn rng_for(seed: u64, stream: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Values on a grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension { expected: grid.len(), got: values.len() });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite field value at index {k}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self { values: vec![0.0; grid.len()], grid }
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self { values: vec![value; grid.len()], grid }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.nx() + i]
    }

    fn check_same_grid(&self, other: &Field) -> Result<()> {
        if !self.grid.same_shape(&other.grid) {
            return Err(Error::Grid(format!(
                "grid mismatch: {}x{} vs {}x{}",
                self.grid.nx(),
                self.grid.ny(),
                other.grid.nx(),
                other.grid.ny()
            )));
        }
        Ok(())
    }
}

/// Exact posterior of a (small) factor graph.
#[derive(Debug, Clone)]
pub struct DensePosterior {
    pub mean: Vec<f64>,
    /// Marginal variances, when requested.
    pub variance: Option<Vec<f64>>,
}

/// Solve `P_post mu = h_post` by dense Cholesky factorization.
pub fn dense_posterior(graph: &FactorGraph, with_variance: bool, limit: usize) -> Result<DensePosterior> {
    let n = graph.len();
    if n > limit {
        return Err(Error::TooLarge { n, limit });
    }
    let p = DMatrix::from_row_slice(n, n, &graph.dense_precision());
    let chol = p.cholesky().ok_or(Error::NotSpd)?;
    let h = DVector::from_column_slice(graph.node_shift());
    let mean = chol.solve(&h).as_slice().to_vec();
    let variance = with_variance.then(|| chol.inverse().diagonal().as_slice().to_vec());
    Ok(DensePosterior { mean, variance })
}

/// Posterior mean on a grid via the dense oracle, with the default size limit.
pub fn dense_posterior_mean(grid: &GridSpec, graph: &FactorGraph) -> Result<Field> {
    if graph.len() != grid.len() {
        return Err(Error::Dimension { expected: grid.len(), got: graph.len() });
    }
    let post = dense_posterior(graph, false, DENSE_LIMIT)?;
    Field::new(*grid, post.mean)
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone, Copy)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator.
pub fn conjugate_gradient(
    op: &SparseOperator,
    rhs: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, CgReport)> {
    let n = op.dim();
    if rhs.len() != n {
        return Err(Error::Dimension { expected: n, got: rhs.len() });
    }
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let rhs_norm = dot(rhs, rhs).sqrt();
    let mut x = vec![0.0; n];
    if rhs_norm == 0.0 {
        return Ok((x, CgReport { iterations: 0, relative_residual: 0.0 }));
    }
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 1..=max_iters {
        op.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotSpd);
        }
        let step = rz / pap;
        for k in 0..n {
            x[k] += step * p[k];
            r[k] -= step * ap[k];
        }
        let res = dot(&r, &r).sqrt() / rhs_norm;
        if res <= tol {
            return Ok((x, CgReport { iterations: it, relative_residual: res }));
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_next = dot(&r, &z);
        let ratio = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + ratio * p[k];
        }
    }
    Err(Error::Solver(format!("conjugate gradients did not reach {tol:e} in {max_iters} iterations")))
}

/// Draw from the GMRF prior by solving `L^(alpha/2) f = sqrt(sigma^2 q / (dx dy)) z`.
pub fn sample_gmrf(grid: &GridSpec, hyper: &Hyperparams, seed: u64) -> Result<Field> {
    hyper.validate()?;
    if grid.boundary() != Boundary::Dirichlet {
        return Err(Error::Parameter("prior sampling requires a Dirichlet boundary".into()));
    }
    let root = operator_power(&build_shift_operator(grid, hyper.kappa())?, hyper.alpha / 2)?;
    let scale = (hyper.sigma2 * hyper.q() / grid.cell_area()).sqrt();
    let mut rng = rng_for(seed, Stream::FieldNoise);
    let rhs: Vec<f64> = (0..grid.len()).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let (values, _) = conjugate_gradient(&root, &rhs, 1e-8, 10 * grid.len())?;
    Field::new(*grid, values)
}

/// Ground truth plus noisy observations of a random subset of nodes.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub truth: Field,
    pub observations: ObservationSet,
}

/// Number of nodes observed at a given density.
pub fn observation_count(n: usize, density: f64) -> usize {
    (density * n as f64).floor() as usize
}

pub fn make_synthetic(grid: &GridSpec, hyper: &Hyperparams, density: f64, seed: u64) -> Result<SyntheticProblem> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Parameter(format!("density must lie in (0, 1], got {density}")));
    }
    let truth = sample_gmrf(grid, hyper, seed)?;
    let n = grid.len();
    let m = observation_count(n, density);
    let mut select = rng_for(seed, Stream::NodeSelection);
    let mut nodes = sample_indices(&mut select, n, m).into_vec();
    nodes.sort_unstable();
    let mut noise = rng_for(seed, Stream::ObservationNoise);
    let sd = hyper.sigma_y2.sqrt();
    let observations = ObservationSet::with_variance(
        nodes.into_iter().map(|k| (k, truth.values[k] + sd * noise.sample::<f64, _>(StandardNormal))),
        hyper.sigma_y2,
    );
    Ok(SyntheticProblem { truth, observations })
}

/// Root-mean-square error, optionally weighted per cell.
pub fn rmse(estimate: &Field, truth: &Field, weights: Option<&Field>) -> Result<f64> {
    estimate.check_same_grid(truth)?;
    match weights {
        None => {
            let sum: f64 = estimate.values.iter().zip(&truth.values).map(|(e, t)| (e - t) * (e - t)).sum();
            Ok((sum / estimate.values.len() as f64).sqrt())
        }
        Some(w) => {
            estimate.check_same_grid(w)?;
            if w.values.iter().any(|&x| x < 0.0) {
                return Err(Error::Parameter("weights must be nonnegative".into()));
            }
            let total: f64 = w.values.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Parameter("weights must not all be zero".into()));
            }
            let sum: f64 =
                estimate.values.iter().zip(&truth.values).zip(&w.values).map(|((e, t), w)| w * (e - t) * (e - t)).sum();
            Ok((sum / total).sqrt())
        }
    }
}

/// Pointwise absolute error.
pub fn l1_error_field(estimate: &Field, truth: &Field) -> Result<Field> {
    estimate.check_same_grid(truth)?;
    let values = estimate.values.iter().zip(&truth.values).map(|(e, t)| (e - t).abs()).collect();
    Ok(Field { grid: estimate.grid, values })
}

/// `||a - b|| / ||b||` in the Euclidean norm; absolute when `b` is zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}
