//! Accuracy and wall-time suite over grid sizes, observation densities and methods.

use anyhow::{bail, Context};
use mpda_core::oracle::{make_synthetic, rmse, DENSE_LIMIT};
use mpda_core::solve::solve;
use mpda_core::{Boundary, GridSpec, Hyperparams, Method, SolveOptions};

/// Largest side for which rows also report the error against the dense posterior.
pub const ORACLE_MAX_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub method: Method,
    pub size: usize,
    pub density: f64,
    pub seed: u64,
    pub wall_time_s: f64,
    pub iterations: usize,
    pub status: String,
    pub rmse_truth: f64,
    pub rmse_oracle: Option<f64>,
}

/// Mean over seeds of one `(method, size, density)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub size: usize,
    pub density: f64,
    pub runs: usize,
    pub diverged: usize,
    pub wall_time_s: f64,
    pub iterations: f64,
    pub rmse_truth: f64,
    pub rmse_oracle: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteConfig {
    pub hyper: Hyperparams,
    /// Per-method options; the method field is overwritten for each cell.
    pub solve: SolveOptions,
}

/// Run every combination on square unit-domain grids, sequentially.
pub fn run_suite(
    sizes: &[usize],
    densities: &[f64],
    methods: &[Method],
    seeds: &[u64],
    config: &SuiteConfig,
) -> anyhow::Result<Vec<BenchResult>> {
    if methods.contains(&Method::Exact) {
        if let Some(&big) = sizes.iter().find(|&&s| s > ORACLE_MAX_DIM) {
            bail!("exact method limited to {ORACLE_MAX_DIM}x{ORACLE_MAX_DIM}, got {big}");
        }
    }
    let mut rows = Vec::new();
    for &size in sizes {
        let grid = GridSpec::unit_square(size, size, Boundary::Dirichlet)?;
        for &density in densities {
            for &seed in seeds {
                let problem = make_synthetic(&grid, &config.hyper, density, seed)
                    .with_context(|| format!("synthetic problem {size}x{size} density {density} seed {seed}"))?;
                let oracle = if size <= ORACLE_MAX_DIM && grid.len() <= DENSE_LIMIT {
                    let opts = SolveOptions { method: Method::Exact, ..config.solve.clone() };
                    Some(solve(&grid, &config.hyper, &problem.observations, &opts)?.mean)
                } else {
                    None
                };
                for &method in methods {
                    let opts = SolveOptions { method, ..config.solve.clone() };
                    let sol = solve(&grid, &config.hyper, &problem.observations, &opts)
                        .with_context(|| format!("{method} on {size}x{size} density {density} seed {seed}"))?;
                    rows.push(BenchResult {
                        method,
                        size,
                        density,
                        seed,
                        wall_time_s: sol.elapsed.as_secs_f64(),
                        iterations: sol.iterations,
                        status: sol.status.label().to_string(),
                        rmse_truth: rmse(&sol.mean, &problem.truth, None)?,
                        rmse_oracle: oracle.as_ref().map(|o| rmse(&sol.mean, o, None)).transpose()?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Means over seeds, in first-appearance order of the cells.
pub fn aggregate(rows: &[BenchResult]) -> Vec<Aggregate> {
    let mut out: Vec<(Aggregate, usize)> = Vec::new();
    for r in rows {
        let idx = out
            .iter()
            .position(|(a, _)| a.method == r.method && a.size == r.size && a.density == r.density)
            .unwrap_or_else(|| {
                out.push((
                    Aggregate {
                        method: r.method,
                        size: r.size,
                        density: r.density,
                        runs: 0,
                        diverged: 0,
                        wall_time_s: 0.0,
                        iterations: 0.0,
                        rmse_truth: 0.0,
                        rmse_oracle: r.rmse_oracle.map(|_| 0.0),
                    },
                    0,
                ));
                out.len() - 1
            });
        let (a, _) = &mut out[idx];
        a.runs += 1;
        a.diverged += usize::from(r.status == "diverged");
        a.wall_time_s += r.wall_time_s;
        a.iterations += r.iterations as f64;
        a.rmse_truth += r.rmse_truth;
        if let (Some(sum), Some(v)) = (a.rmse_oracle.as_mut(), r.rmse_oracle) {
            *sum += v;
        }
    }
    out.into_iter()
        .map(|(mut a, _)| {
            let n = a.runs as f64;
            a.wall_time_s /= n;
            a.iterations /= n;
            a.rmse_truth /= n;
            a.rmse_oracle = a.rmse_oracle.map(|s| s / n);
            a
        })
        .collect()
}

pub const CSV_HEADER: [&str; 10] =
    ["kind", "method", "size", "density", "seed", "wall_time_s", "iterations", "status", "rmse_truth", "rmse_oracle"];

/// One row per run followed by one `mean` row per cell.
pub fn to_csv(rows: &[BenchResult]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            "run".to_string(),
            r.method.to_string(),
            r.size.to_string(),
            r.density.to_string(),
            r.seed.to_string(),
            r.wall_time_s.to_string(),
            r.iterations.to_string(),
            r.status.clone(),
            r.rmse_truth.to_string(),
            opt(r.rmse_oracle),
        ])?;
    }
    for a in aggregate(rows) {
        w.write_record([
            "mean".to_string(),
            a.method.to_string(),
            a.size.to_string(),
            a.density.to_string(),
            String::new(),
            a.wall_time_s.to_string(),
            a.iterations.to_string(),
            format!("{}/{} diverged", a.diverged, a.runs),
            a.rmse_truth.to_string(),
            opt(a.rmse_oracle),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
