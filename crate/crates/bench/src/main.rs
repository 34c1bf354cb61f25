use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use mpda_bench::{run_suite, to_csv, SuiteConfig};
use mpda_core::{GradientTest, Hyperparams, LbfgsOptions, Method, SolveOptions};

/// Time each method over a grid of sizes, densities and seeds and print a CSV table.
#[derive(Debug, Parser)]
#[command(name = "mpda-bench", version)]
struct Args {
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1")]
    densities: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "mp-multigrid,3dvar")]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Worker threads for message-passing sweeps.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// 3D-Var gradient test: relative-inf or absolute-l2.
    #[arg(long, default_value = "relative-inf")]
    grad_test: GradientTest,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let methods = args.methods.iter().map(|m| m.parse::<Method>()).collect::<Result<Vec<_>, _>>()?;
    let config = SuiteConfig {
        hyper: Hyperparams::default(),
        solve: SolveOptions {
            threads: args.threads,
            lbfgs: LbfgsOptions { test: args.grad_test, ..Default::default() },
            ..Default::default()
        },
    };
    let rows = run_suite(&args.sizes, &args.densities, &methods, &args.seeds, &config)?;
    let table = to_csv(&rows)?;
    print!("{table}");
    if let Some(path) = &args.out {
        std::fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
