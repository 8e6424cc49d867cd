mod experiments;
mod output;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use experiments::Criterion;
use spec::Flags;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("output: {0}")]
    Output(String),

    #[error("experiment failed: {0}")]
    Run(String),

    #[error("serve: {0}")]
    Serve(String),
}

#[derive(Parser, Debug)]
#[command(name = "qshape", version, about = "Guided tabular Q-learning experiments and run service")]
struct Cli {
    /// Start the HTTP service (same as the `serve` subcommand).
    #[arg(long, global = false)]
    serve: bool,

    /// Bind address for the service; defaults to QSHAPE_BIND_ADDR.
    #[arg(long)]
    bind: Option<String>,

    /// Data directory for the service; defaults to QSHAPE_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write CSVs, plots and a verdict file.
    Run {
        /// theorem1, lemma2, theorem2, suboptimality, efficiency or adaptability.
        #[arg(long)]
        experiment: Option<String>,
        /// chain, gridworld, pendulum or mountain_car.
        #[arg(long)]
        env: Option<String>,
        /// `N` for seeds 0..N, `a..b`, or `a,b,c`.
        #[arg(long)]
        seeds: Option<String>,
        /// start, mid, post_convergence or every_10k (adaptability only).
        #[arg(long)]
        schedule: Option<String>,
        /// q_heuristic or reward_shaping.
        #[arg(long)]
        mode: Option<String>,
        /// TOML file with run config fields and experiment settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Verdict<'a> {
    experiment: &'a str,
    env: &'a str,
    seeds: &'a [u64],
    pass: bool,
    criteria: &'a [Criterion],
    files: Vec<String>,
}

fn run_experiment(flags: Flags) -> Result<bool, CliError> {
    let spec = spec::resolve(&flags)?;
    let start = Instant::now();
    tracing::info!(experiment = spec.experiment.name(), env = spec.env_label(), seeds = spec.seeds.len(), "running");
    let (mut artifacts, criteria) = experiments::run(&spec)?;
    let pass = criteria.iter().all(|c| c.pass);
    let verdict_name = format!("{}_{}_verdict.json", spec.experiment.name(), spec.env_label());
    let mut files: Vec<String> = artifacts.names().map(str::to_owned).collect();
    files.push(verdict_name.clone());
    let verdict = Verdict {
        experiment: spec.experiment.name(),
        env: spec.env_label(),
        seeds: &spec.seeds,
        pass,
        criteria: &criteria,
        files,
    };
    let json = serde_json::to_vec_pretty(&verdict).map_err(|e| CliError::Output(e.to_string()))?;
    artifacts.file(verdict_name, json);
    let written = artifacts.write(&spec.out)?;

    for c in &criteria {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!(
        "{} files written to {} in {:.1}s",
        written.len(),
        spec.out.display(),
        start.elapsed().as_secs_f64()
    );
    if !pass {
        let failing: Vec<&str> = criteria.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        eprintln!("failing criteria: {}", failing.join(", "));
    }
    Ok(pass)
}

fn serve(bind: Option<String>, data_dir: Option<PathBuf>) -> Result<(), CliError> {
    let mut opts = qshape_service::ServeOptions::from_env();
    if let Some(b) = bind {
        opts.bind = b;
    }
    if let Some(d) = data_dir {
        opts.data_dir = d;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Serve(e.to_string()))?;
    rt.block_on(qshape_service::serve(opts)).map_err(|e| CliError::Serve(e.to_string()))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Some(Command::Run {
            experiment,
            env,
            seeds,
            schedule,
            mode,
            config,
            out,
        }) => run_experiment(Flags {
            experiment,
            env,
            seeds,
            schedule,
            mode,
            config,
            out,
        }),
        Some(Command::Serve { bind, data_dir }) => serve(bind.or(cli.bind), data_dir.or(cli.data_dir)).map(|_| true),
        None if cli.serve => serve(cli.bind, cli.data_dir).map(|_| true),
        None => Err(CliError::Config("nothing to do; use `run`, `serve` or --serve".into())),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
