//! Command-line front end: estimation on CSV data, simulation, Monte Carlo
//! studies, and the oracle diagnostic suite.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fortify",
    version,
    about = "Average treatment effect estimation that tolerates invalid treatment confounding proxies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate treatment effects from a CSV dataset across a gamma sweep.
    Estimate(EstimateArgs),
    /// Generate a benchmark-process dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo study of the estimators on the benchmark process.
    Mc(McArgs),
    /// Run the exact-oracle diagnostic suite.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for report files.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rayon worker threads (0 = default).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// CSV file with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated gamma values, e.g. 2,4,6,8.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<usize>>,
    /// Comma-separated estimators from fPOR, fPIPW, fPMR, PDR<j>, DR.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Bootstrap resamples; switches the standard-error engine to bootstrap.
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of rows.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    tau_star: Option<f64>,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Misspecification scenario: none, I, II or III.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Bootstrap resamples per replicate; switches the SE engine.
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Discrete-law fixture (JSON); defaults to the bundled tabulated law.
    #[arg(long)]
    fixture: Option<PathBuf>,
}

pub(crate) struct ResolvedCommon {
    pub out: PathBuf,
    pub seed_flag: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (out_dir, result) = match cli.command {
        Command::Estimate(args) => run(&args.common, |cfg, common| {
            commands::estimate(cfg, common, &args.data, &args.gamma, &args.methods, args.bootstrap)
        }),
        Command::Simulate(args) => {
            run(&args.common, |cfg, common| commands::simulate(cfg, common, args.n, args.tau_star))
        }
        Command::Mc(args) => run(&args.common, |cfg, common| {
            commands::mc(
                cfg,
                common,
                args.reps,
                args.n,
                args.scenario.as_deref(),
                &args.methods,
                args.bootstrap,
            )
        }),
        Command::OracleCheck(args) => run(&args.common, |cfg, common| {
            commands::oracle_check(cfg, common, args.fixture.as_deref())
        }),
    };
    match result {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            let out = out_dir.unwrap_or_else(|| PathBuf::from("."));
            let _ = std::fs::create_dir_all(&out);
            let payload = serde_json::json!({ "error": message });
            let _ = std::fs::write(
                out.join("errors.json"),
                serde_json::to_string_pretty(&payload).unwrap_or_default(),
            );
            ExitCode::FAILURE
        }
    }
}

/// Loads the config, applies the worker setting and delegates. Returns the
/// resolved output directory alongside so the error path can write there.
fn run<F>(common: &CommonArgs, body: F) -> (Option<PathBuf>, Result<ExitCode, String>)
where
    F: FnOnce(RunConfig, &ResolvedCommon) -> Result<ExitCode, String>,
{
    let cfg = match &common.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => return (common.out.clone(), Err(e)),
        },
        None => RunConfig::default(),
    };
    let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    let workers = common.workers.or(cfg.workers).unwrap_or(0);
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    let resolved = ResolvedCommon { out: out.clone(), seed_flag: common.seed };
    (Some(out), body(cfg, &resolved))
}
