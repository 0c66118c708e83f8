//! `nuvmpc` command-line front end.

mod output;
mod run;
mod svg;
mod sweep;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit code for a run that finished without meeting its convergence test,
/// or a verification with failing suites.
pub const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "nuvmpc", about = "Constrained MPC with composite NUV priors and iterated Kalman smoothing")]
struct Cli {
    /// Print iteration progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a scenario and write its trace, summary and optional plot.
    Run(run::RunArgs),
    /// Run the scalar AM/EM loop over a grid of likelihood means and variances.
    ScalarSweep(sweep::SweepArgs),
    /// Check the solver against its reference oracles.
    Verify(verify::VerifyArgs),
    /// Write the initial linear model of a scenario as JSON.
    ExportModel(ExportArgs),
}

/// Scenario selection shared by `run` and `export-model`.
#[derive(Debug, Args)]
pub struct ConfigSource {
    /// Scenario config file (JSON with a `kind` field).
    #[arg(value_name = "CONFIG", conflicts_with_all = ["config", "scenario"])]
    pub path: Option<PathBuf>,
    /// Same as the positional CONFIG.
    #[arg(long, value_name = "FILE", conflicts_with = "scenario")]
    pub config: Option<PathBuf>,
    /// Use the built-in defaults of a scenario instead of a file.
    #[arg(long, value_name = "KIND", value_parser = ["dac", "corridor", "flappy", "obstacle", "race_track"])]
    pub scenario: Option<String>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Directory for `<name>_model.json`; prints to stdout when omitted.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("NUVMPC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("NUVMPC_THREADS must be a positive integer, got {v:?}"))?;
        anyhow::ensure!(n > 0, "NUVMPC_THREADS must be a positive integer, got {v:?}");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn export_model(args: &ExportArgs) -> anyhow::Result<u8> {
    let (cfg, _) = output::load_config(&args.source)?;
    let json = nuvmpc::lssm::ModelDocument::to_json(&cfg.problem()?)?;
    match &args.out_dir {
        Some(dir) => output::write_all(dir, &[(format!("{}_model.json", cfg.name()), json.into_bytes())])?,
        None => println!("{json}"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Run(a) => run::cmd_run(a, cli.verbose),
        Command::ScalarSweep(a) => sweep::cmd_scalar_sweep(a),
        Command::Verify(a) => verify::cmd_verify(a),
        Command::ExportModel(a) => export_model(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
