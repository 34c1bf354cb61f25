//! One entry point for every estimation method, shared by the CLI and the benchmarks.

use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::graph::{FactorGraph, ObservationSet};
use crate::grid::GridSpec;
use crate::mp::{Status, SweepEngine};
use crate::multigrid::{build_hierarchy, run_multigrid, GmrfPrior, LevelReport, DEFAULT_BASE_DIM};
use crate::operator::{build_precision, Hyperparams};
use crate::oracle::{dense_posterior, Field, DENSE_LIMIT};
use crate::parallel::{partition, run_partitioned, Traffic};
use crate::var3d::{minimize, LbfgsOptions, LbfgsStatus, VarProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Mp,
    MpMultigrid,
    Var3d,
    Exact,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mp, Method::MpMultigrid, Method::Var3d, Method::Exact];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mp => "mp",
            Method::MpMultigrid => "mp-multigrid",
            Method::Var3d => "3dvar",
            Method::Exact => "exact",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Parameter(format!("unknown method '{s}' (expected mp, mp-multigrid, 3dvar or exact)"))
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Domain decomposition settings for plain message passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub px: usize,
    pub py: usize,
    pub exchange_period: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub method: Method,
    pub threads: usize,
    pub partition: Option<PartitionSpec>,
    /// Smallest side of the coarsest multigrid level.
    pub base_min_dim: usize,
    pub lbfgs: LbfgsOptions,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            method: Method::MpMultigrid,
            threads: 1,
            partition: None,
            base_min_dim: DEFAULT_BASE_DIM,
            lbfgs: LbfgsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveStatus {
    Converged,
    MaxIters,
    LineSearchFailed,
    Diverged(String),
}

impl SolveStatus {
    pub fn label(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIters => "max_iters",
            SolveStatus::LineSearchFailed => "line_search_failed",
            SolveStatus::Diverged(_) => "diverged",
        }
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self, SolveStatus::Diverged(_))
    }
}

impl From<&Status> for SolveStatus {
    fn from(s: &Status) -> Self {
        match s {
            Status::Converged => SolveStatus::Converged,
            Status::MaxIters => SolveStatus::MaxIters,
            Status::Diverged(d) => SolveStatus::Diverged(d.to_string()),
        }
    }
}

impl From<LbfgsStatus> for SolveStatus {
    fn from(s: LbfgsStatus) -> Self {
        match s {
            LbfgsStatus::Converged => SolveStatus::Converged,
            LbfgsStatus::MaxIters => SolveStatus::MaxIters,
            LbfgsStatus::LineSearchFailed => SolveStatus::LineSearchFailed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub mean: Field,
    /// Sweeps on the finest level for message passing, L-BFGS iterations for 3D-Var, zero for the exact solve.
    pub iterations: usize,
    pub status: SolveStatus,
    /// Wall time of the solver call alone.
    pub elapsed: Duration,
    pub levels: Vec<LevelReport>,
    pub traffic: Option<Traffic>,
}

/// Posterior mean under a zero-mean Matérn prior on `grid`.
pub fn solve(grid: &GridSpec, hyper: &Hyperparams, obs: &ObservationSet, opts: &SolveOptions) -> Result<Solution> {
    hyper.validate()?;
    obs.validate(grid.len())?;
    if opts.partition.is_some() && opts.method != Method::Mp {
        return Err(Error::Parameter(format!("partitioned runs require method mp, not {}", opts.method)));
    }
    let start = Instant::now();
    let mut levels = Vec::new();
    let mut traffic = None;
    let (values, iterations, status) = match opts.method {
        Method::Mp => {
            let graph = observed_graph(grid, hyper, obs)?;
            let outcome = match opts.partition {
                Some(p) => {
                    let part = partition(grid, &graph, p.px, p.py)?;
                    let run = run_partitioned(&graph, &part, hyper, p.exchange_period, None)?;
                    traffic = Some(run.traffic);
                    run.outcome
                }
                None => SweepEngine::threaded(opts.threads)?.run(&graph, hyper, None)?,
            };
            (outcome.marginals.mean, outcome.iterations, SolveStatus::from(&outcome.status))
        }
        Method::MpMultigrid => {
            let prior = GmrfPrior::new(*hyper);
            let plan = build_hierarchy(grid, opts.base_min_dim);
            let engine = SweepEngine::threaded(opts.threads)?;
            let outcome = run_multigrid(&|g| prior.graph_at(g), obs, hyper, &plan, &engine)?;
            let iterations = outcome.finest_iterations();
            levels = outcome.levels;
            (outcome.marginals.mean, iterations, SolveStatus::from(&outcome.status))
        }
        Method::Var3d => {
            let problem = VarProblem::new(build_precision(grid, hyper)?, vec![0.0; grid.len()], obs.clone())?;
            let res = minimize(&problem, &problem.prior_mean, &opts.lbfgs)?;
            (res.x, res.iterations, SolveStatus::from(res.status))
        }
        Method::Exact => {
            let graph = observed_graph(grid, hyper, obs)?;
            (dense_posterior(&graph, false, DENSE_LIMIT)?.mean, 0, SolveStatus::Converged)
        }
    };
    let elapsed = start.elapsed();
    // Diverged runs can carry non-finite means; keep them out of Field's finiteness check.
    let values = if status.is_diverged() {
        values.into_iter().map(|v| if v.is_finite() { v } else { 0.0 }).collect()
    } else {
        values
    };
    Ok(Solution { mean: Field::new(*grid, values)?, iterations, status, elapsed, levels, traffic })
}

fn observed_graph(grid: &GridSpec, hyper: &Hyperparams, obs: &ObservationSet) -> Result<FactorGraph> {
    FactorGraph::from_precision(&build_precision(grid, hyper)?, None)?.apply_observations(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;
    use crate::oracle::{make_synthetic, relative_error};

    fn problem(n: usize) -> (GridSpec, Hyperparams, ObservationSet) {
        let grid = GridSpec::unit_square(n, n, Boundary::Dirichlet).unwrap();
        let hyper = Hyperparams { tau: 1e-9, ..Default::default() };
        let obs = make_synthetic(&grid, &hyper, 0.1, 4).unwrap().observations;
        (grid, hyper, obs)
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("bp".parse::<Method>().is_err());
    }

    #[test]
    fn methods_agree_on_small_problem() {
        let (grid, hyper, obs) = problem(12);
        let exact = solve(&grid, &hyper, &obs, &SolveOptions { method: Method::Exact, ..Default::default() }).unwrap();
        for method in [Method::Mp, Method::MpMultigrid, Method::Var3d] {
            let opts = SolveOptions {
                method,
                base_min_dim: 6,
                lbfgs: LbfgsOptions { tol: 1e-9, max_iters: 2000, ..Default::default() },
                ..Default::default()
            };
            let sol = solve(&grid, &hyper, &obs, &opts).unwrap();
            assert_eq!(sol.status, SolveStatus::Converged, "{method}");
            assert!(relative_error(&sol.mean.values, &exact.mean.values) < 1e-5, "{method}");
        }
    }

    #[test]
    fn partition_needs_plain_mp() {
        let (grid, hyper, obs) = problem(8);
        let part = Some(PartitionSpec { px: 2, py: 2, exchange_period: 1 });
        let opts = SolveOptions { method: Method::Var3d, partition: part, ..Default::default() };
        assert!(solve(&grid, &hyper, &obs, &opts).is_err());
        let opts = SolveOptions { method: Method::Mp, partition: part, ..Default::default() };
        let sol = solve(&grid, &hyper, &obs, &opts).unwrap();
        assert!(sol.traffic.unwrap().bytes > 0);
    }

    #[test]
    fn multigrid_reports_levels() {
        let (grid, hyper, obs) = problem(16);
        let opts = SolveOptions { method: Method::MpMultigrid, base_min_dim: 4, ..Default::default() };
        let sol = solve(&grid, &hyper, &obs, &opts).unwrap();
        let dims: Vec<usize> = sol.levels.iter().map(|l| l.grid.nx()).collect();
        assert_eq!(dims, vec![4, 8, 16]);
        assert_eq!(sol.iterations, sol.levels[2].iterations);
    }
}
