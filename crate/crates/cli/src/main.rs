use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use orthant_core::harness::{load_config, run, HarnessError, Mode, RunReport};

#[derive(Parser)]
#[command(
    name = "orthant",
    version,
    about = "Robin boundary problems on the nonnegative orthant"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML or JSON config.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// naive, decomposed, both, fd_compare, selftest or convergence
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn threads() -> Result<Option<usize>, HarnessError> {
    match std::env::var("ORTHANT_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(HarnessError::validation(
                "ORTHANT_THREADS",
                format!("expected a positive integer, got `{v}`"),
            )),
        },
    }
}

fn summarize(report: &RunReport, out: &Path) {
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!(
        "{} rows written to {}",
        report.results.len(),
        out.join("results.csv").display()
    );
}

fn solve(
    config: &Path,
    mode: Option<Mode>,
    paths: Option<usize>,
    dt: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(RunReport, PathBuf), HarnessError> {
    let mut cfg = load_config(config)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(n) = paths {
        cfg.budgets.n_paths = n;
    }
    if let Some(dt) = dt {
        cfg.budgets.dt = dt;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = out {
        cfg.outputs.dir = dir;
    }
    let dir = cfg.outputs.dir.clone();
    let report = match threads()? {
        None => run(&cfg)?,
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::validation("ORTHANT_THREADS", e.to_string()))?;
            pool.install(|| run(&cfg))?
        }
    };
    Ok((report, dir))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Command::Solve {
        config,
        mode,
        paths,
        dt,
        seed,
        out,
    } = cli.command;
    let fallback_dir = out.clone();
    match solve(&config, mode, paths, dt, seed, out) {
        Ok((report, dir)) => {
            summarize(&report, &dir);
            if report.all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            let record = e.record();
            eprintln!("{record}");
            if let Some(dir) = fallback_dir {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.json"), record.to_string());
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
