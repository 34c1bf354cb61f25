//! End-to-end checks of the public solver API against a conjugate-gradient oracle.

use mpda_core::io::{read_field, read_observations, write_field, write_observations};
use mpda_core::operator::build_precision;
use mpda_core::oracle::{make_synthetic, relative_error};
use mpda_core::solve::solve;
use mpda_core::{
    Boundary, GradientTest, GridSpec, Hyperparams, LbfgsOptions, Method, ObservationSet, PartitionSpec, SolveOptions,
    SolveStatus,
};

/// Solves `(P + H^T R^-1 H) x = H^T R^-1 y` by unpreconditioned CG.
fn cg_posterior_mean(grid: &GridSpec, hyper: &Hyperparams, obs: &ObservationSet) -> Vec<f64> {
    let p = build_precision(grid, hyper).unwrap();
    let n = grid.len();
    let mut diag_obs = vec![0.0; n];
    let mut b = vec![0.0; n];
    for o in obs.entries() {
        diag_obs[o.node] += 1.0 / o.variance;
        b[o.node] += o.value / o.variance;
    }
    let apply = |x: &[f64]| -> Vec<f64> {
        let mut y = p.matvec(x).unwrap();
        for k in 0..n {
            y[k] += diag_obs[k] * x[k];
        }
        y
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut d = r.clone();
    let mut rr = dot(&r, &r);
    let stop = 1e-28 * dot(&b, &b);
    for _ in 0..50 * n {
        if rr <= stop {
            break;
        }
        let ad = apply(&d);
        let step = rr / dot(&d, &ad);
        for k in 0..n {
            x[k] += step * d[k];
            r[k] -= step * ad[k];
        }
        let next = dot(&r, &r);
        for k in 0..n {
            d[k] = r[k] + next / rr * d[k];
        }
        rr = next;
    }
    x
}

fn problem(n: usize, density: f64, seed: u64) -> (GridSpec, Hyperparams, ObservationSet) {
    let grid = GridSpec::unit_square(n, n, Boundary::Dirichlet).unwrap();
    let hyper = Hyperparams { tau: 1e-10, max_iters: 100_000, ..Default::default() };
    let obs = make_synthetic(&grid, &hyper, density, seed).unwrap().observations;
    (grid, hyper, obs)
}

#[test]
fn every_method_reaches_the_posterior_mean() {
    let (grid, hyper, obs) = problem(24, 0.1, 4);
    let reference = cg_posterior_mean(&grid, &hyper, &obs);
    let lbfgs = LbfgsOptions { tol: 1e-9, max_iters: 20_000, test: GradientTest::AbsoluteL2, ..Default::default() };
    for (method, tolerance) in
        [(Method::Exact, 1e-10), (Method::Var3d, 1e-6), (Method::Mp, 1e-5), (Method::MpMultigrid, 1e-5)]
    {
        let opts = SolveOptions { method, base_min_dim: 6, lbfgs, ..Default::default() };
        let sol = solve(&grid, &hyper, &obs, &opts).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged, "{method}");
        let rel = relative_error(&sol.mean.values, &reference);
        assert!(rel <= tolerance, "{method}: rel {rel:e}");
    }
}

#[test]
fn partitioned_and_threaded_runs_match_serial() {
    let (grid, hyper, obs) = problem(20, 0.1, 5);
    let serial = solve(&grid, &hyper, &obs, &SolveOptions { method: Method::Mp, ..Default::default() }).unwrap();
    let threaded =
        solve(&grid, &hyper, &obs, &SolveOptions { method: Method::Mp, threads: 3, ..Default::default() }).unwrap();
    assert_eq!(serial.mean, threaded.mean);

    let partition = Some(PartitionSpec { px: 2, py: 3, exchange_period: 1 });
    let opts = SolveOptions { method: Method::Mp, partition, ..Default::default() };
    let split = solve(&grid, &hyper, &obs, &opts).unwrap();
    assert_eq!(split.mean, serial.mean);
    let traffic = split.traffic.unwrap();
    assert_eq!(traffic.sweeps, serial.iterations);
    assert!(traffic.bytes > 0);
}

#[test]
fn files_round_trip_through_a_solve() {
    let (grid, hyper, obs) = problem(12, 0.2, 6);
    let mut text = Vec::new();
    write_observations(&mut text, &grid, &obs).unwrap();
    let reread = read_observations(text.as_slice(), &grid).unwrap();
    assert_eq!(reread, obs);

    let opts = SolveOptions { method: Method::Exact, ..Default::default() };
    let sol = solve(&grid, &hyper, &reread, &opts).unwrap();
    let mut bytes = Vec::new();
    write_field(&mut bytes, &sol.mean).unwrap();
    assert_eq!(read_field(bytes.as_slice()).unwrap(), sol.mean);
}
