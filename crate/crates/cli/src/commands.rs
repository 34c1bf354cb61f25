use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use mpda_core::io::{load_field, load_observations, save_field, save_observations};
use mpda_core::oracle::{l1_error_field, make_synthetic, rmse, DENSE_LIMIT};
use mpda_core::solve::solve;
use mpda_core::var3d::LbfgsOptions;
use mpda_core::{Field, GridSpec, Hyperparams, Method, ObservationSet, PartitionSpec, SolveOptions};

use crate::render::write_image;
use crate::{
    hyperparams, AssimilateArgs, Cli, Command, EvalArgs, GridSearchArgs, Outcome, RenderArgs, SolverArgs, SynthArgs,
};

pub fn dispatch(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Assimilate(a) => assimilate(&a),
        Command::Eval(a) => eval(&a),
        Command::Render(a) => render(&a),
        Command::Gridsearch(a) => run_gridsearch(&a),
    }
}

fn default_solver() -> SolverArgs {
    let h = Hyperparams::default();
    SolverArgs { c: h.c, eta: h.eta, tau: h.tau, max_iters: h.max_iters }
}

fn read_field(path: &Path) -> anyhow::Result<Field> {
    load_field(path).with_context(|| format!("reading field {}", path.display()))
}

fn write_field(path: &Path, field: &Field) -> anyhow::Result<()> {
    save_field(path, field).with_context(|| format!("writing field {}", path.display()))
}

fn synth(args: &SynthArgs) -> anyhow::Result<Outcome> {
    let grid = args.grid.grid()?;
    let hyper = hyperparams(&args.prior, &default_solver())?;
    let problem = make_synthetic(&grid, &hyper, args.density, args.seed)?;
    write_field(&args.truth, &problem.truth)?;
    save_observations(&args.obs, &grid, &problem.observations)
        .with_context(|| format!("writing observations {}", args.obs.display()))?;
    println!("seed = {}", args.seed);
    println!(
        "grid = {}x{} {}, density = {}, observations = {}",
        grid.nx(),
        grid.ny(),
        grid.boundary(),
        args.density,
        problem.observations.len()
    );
    println!(
        "alpha = {}, nu = {}, lengthscale = {}, sigma2 = {}, kappa = {}, obs_var = {}",
        hyper.alpha,
        hyper.nu(),
        hyper.lengthscale,
        hyper.sigma2,
        hyper.kappa(),
        hyper.sigma_y2
    );
    Ok(Outcome::Success)
}

fn diagnostics_path(args: &AssimilateArgs) -> PathBuf {
    args.diagnostics.clone().unwrap_or_else(|| {
        let mut name = args.out.clone().into_os_string();
        name.push(".diag.txt");
        name.into()
    })
}

fn assimilate(args: &AssimilateArgs) -> anyhow::Result<Outcome> {
    let grid = args.grid.grid()?;
    let hyper = hyperparams(&args.prior, &args.solver)?;
    let obs =
        load_observations(&args.obs, &grid).with_context(|| format!("reading observations {}", args.obs.display()))?;
    let partition = match (args.px, args.py) {
        (None, None) => None,
        (px, py) => {
            Some(PartitionSpec { px: px.unwrap_or(1), py: py.unwrap_or(1), exchange_period: args.exchange_period })
        }
    };
    let method = Method::from(args.method);
    let opts = SolveOptions {
        method,
        threads: args.threads,
        partition,
        base_min_dim: args.base_dim,
        lbfgs: LbfgsOptions { memory: args.memory, tol: args.tol, max_iters: args.lbfgs_iters, test: args.grad_test },
    };
    let solution = solve(&grid, &hyper, &obs, &opts)?;
    write_field(&args.out, &solution.mean)?;

    let mut d = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(d, "{k} = {v}");
    };
    kv("method", &method);
    kv("status", &solution.status.label());
    if let mpda_core::SolveStatus::Diverged(why) = &solution.status {
        kv("divergence", why);
    }
    kv("iterations", &solution.iterations);
    kv("wall_time_s", &solution.elapsed.as_secs_f64());
    kv("nx", &grid.nx());
    kv("ny", &grid.ny());
    kv("boundary", &grid.boundary());
    kv("observations", &obs.len());
    kv("obs_file", &args.obs.display());
    kv("alpha", &hyper.alpha);
    kv("lengthscale", &hyper.lengthscale);
    kv("sigma2", &hyper.sigma2);
    kv("c", &hyper.c);
    kv("eta", &hyper.eta);
    kv("tau", &hyper.tau);
    kv("max_iters", &hyper.max_iters);
    kv("threads", &args.threads);
    match method {
        Method::MpMultigrid => kv("base_dim", &args.base_dim),
        Method::Var3d => {
            kv("tol", &args.tol);
            kv("grad_test", &args.grad_test.name());
            kv("lbfgs_iters", &args.lbfgs_iters);
            kv("memory", &args.memory);
        }
        _ => {}
    }
    for (k, level) in solution.levels.iter().enumerate() {
        let v = format!(
            "{}x{} observations={} iterations={} status={}",
            level.grid.nx(),
            level.grid.ny(),
            level.observations,
            level.iterations,
            level.status.label()
        );
        kv(&format!("level.{k}"), &v);
    }
    if let (Some(p), Some(t)) = (partition, &solution.traffic) {
        kv("px", &p.px);
        kv("py", &p.py);
        kv("exchange_period", &p.exchange_period);
        kv("sweeps", &t.sweeps);
        kv("exchanges", &t.exchanges);
        kv("messages_exchanged", &t.messages);
        kv("bytes_exchanged", &t.bytes);
        let per: Vec<String> = t.subdomain_iterations.iter().map(ToString::to_string).collect();
        kv("subdomain_iterations", &per.join(","));
    }
    let diag = diagnostics_path(args);
    std::fs::write(&diag, d).with_context(|| format!("writing diagnostics {}", diag.display()))?;

    println!(
        "{method}: {} after {} iterations in {:.3} s",
        solution.status.label(),
        solution.iterations,
        solution.elapsed.as_secs_f64()
    );
    Ok(if solution.status.is_diverged() { Outcome::Diverged } else { Outcome::Success })
}

fn eval(args: &EvalArgs) -> anyhow::Result<Outcome> {
    let estimate = read_field(&args.estimate)?;
    let truth = read_field(&args.truth)?;
    let weights = args.weights.as_deref().map(read_field).transpose()?;
    let value = rmse(&estimate, &truth, weights.as_ref())?;
    if weights.is_some() {
        println!("weighted_rmse = {value}");
    } else {
        println!("rmse = {value}");
    }
    if let Some(path) = &args.l1_out {
        write_field(path, &l1_error_field(&estimate, &truth)?)?;
    }
    Ok(Outcome::Success)
}

fn render(args: &RenderArgs) -> anyhow::Result<Outcome> {
    let field = read_field(&args.field)?;
    let file = File::create(&args.out).with_context(|| format!("creating image {}", args.out.display()))?;
    write_image(BufWriter::new(file), &field, args.mode)
        .with_context(|| format!("writing image {}", args.out.display()))?;
    Ok(Outcome::Success)
}

/// Baseline the grid-search ratios are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridSearchReference {
    /// Dense solve when the grid is small enough, otherwise 3D-Var.
    Auto,
    Exact,
    /// 3D-Var at gradient tolerance 1e-8.
    #[value(name = "3dvar")]
    Var3d,
}

/// RMSE ratios of message passing over a baseline, per `(eta, c)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub grid: GridSpec,
    pub density: f64,
    pub cs: Vec<f64>,
    pub etas: Vec<f64>,
    pub reference: Method,
    pub reference_rmse: f64,
    /// `cells[e][k]` is the ratio for `etas[e]` and `cs[k]`; `None` marks divergence.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl GridSearch {
    pub fn cell(&self, eta: f64, c: f64) -> Option<Option<f64>> {
        let e = self.etas.iter().position(|&x| x == eta)?;
        let k = self.cs.iter().position(|&x| x == c)?;
        Some(self.cells[e][k])
    }

    /// Aligned text table: one row per eta, one column per c, `-` for divergence.
    pub fn table(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::with_capacity(self.etas.len() + 1);
        let mut header = vec!["eta \\ c".to_string()];
        header.extend(self.cs.iter().map(|c| c.to_string()));
        rows.push(header);
        for (eta, cells) in self.etas.iter().zip(&self.cells) {
            let mut row = vec![eta.to_string()];
            row.extend(cells.iter().map(|v| v.map_or_else(|| "-".to_string(), |r| format!("{r:.3}"))));
            rows.push(row);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|k| rows.iter().map(|r| r[k].len()).max().unwrap_or(0)).collect();
        let mut out = format!(
            "# grid {}x{}, density {}, ratio of message-passing RMSE to {} RMSE ({:.4})\n",
            self.grid.nx(),
            self.grid.ny(),
            self.density,
            self.reference,
            self.reference_rmse
        );
        for row in rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(k, (s, &w))| if k == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Run plain message passing for every `(eta, c)` pair on one synthetic problem.
#[allow(clippy::too_many_arguments)]
pub fn gridsearch(
    grid: &GridSpec,
    base: &Hyperparams,
    density: f64,
    seed: u64,
    cs: &[f64],
    etas: &[f64],
    reference: GridSearchReference,
    threads: usize,
) -> anyhow::Result<GridSearch> {
    if cs.is_empty() || etas.is_empty() {
        bail!("grid search needs at least one c and one eta");
    }
    let problem = make_synthetic(grid, base, density, seed)?;
    let obs: &ObservationSet = &problem.observations;
    let reference = match reference {
        GridSearchReference::Exact => Method::Exact,
        GridSearchReference::Var3d => Method::Var3d,
        GridSearchReference::Auto if grid.len() <= DENSE_LIMIT => Method::Exact,
        GridSearchReference::Auto => Method::Var3d,
    };
    let ref_opts = SolveOptions {
        method: reference,
        lbfgs: LbfgsOptions { tol: 1e-8, max_iters: 20_000, ..Default::default() },
        ..Default::default()
    };
    let reference_rmse = rmse(&solve(grid, base, obs, &ref_opts)?.mean, &problem.truth, None)?;
    let mp_opts = SolveOptions { method: Method::Mp, threads, ..Default::default() };
    let mut cells = Vec::with_capacity(etas.len());
    for &eta in etas {
        let mut row = Vec::with_capacity(cs.len());
        for &c in cs {
            let hyper = Hyperparams { c, eta, ..*base };
            let sol = solve(grid, &hyper, obs, &mp_opts)?;
            row.push(if sol.status.is_diverged() {
                None
            } else {
                Some(rmse(&sol.mean, &problem.truth, None)? / reference_rmse)
            });
        }
        cells.push(row);
    }
    Ok(GridSearch { grid: *grid, density, cs: cs.to_vec(), etas: etas.to_vec(), reference, reference_rmse, cells })
}

fn run_gridsearch(args: &GridSearchArgs) -> anyhow::Result<Outcome> {
    let grid = args.grid.grid()?;
    let solver = SolverArgs { tau: args.tau, max_iters: args.max_iters, ..default_solver() };
    let base = hyperparams(&args.prior, &solver)?;
    for &eta in &args.eta {
        Hyperparams { eta, ..base }.validate()?;
    }
    for &c in &args.c {
        Hyperparams { c, ..base }.validate()?;
    }
    let result = gridsearch(&grid, &base, args.density, args.seed, &args.c, &args.eta, args.reference, args.threads)?;
    let table = result.table();
    print!("{table}");
    if let Some(path) = &args.out {
        std::fs::write(path, &table).with_context(|| format!("writing table {}", path.display()))?;
    }
    Ok(Outcome::Success)
}
