//! `run`: solve one scenario and write its artifacts.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use nuvmpc::scenarios::dac::TargetWave;
use nuvmpc::scenarios::ScenarioConfig;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::output::{self, RunManifest};
use crate::{svg, ConfigSource, EXIT_NOT_CONVERGED};

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Directory for the artifacts.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out_dir: PathBuf,
    /// Seed of every random quantity in the run; replaces the seed of a
    /// random target in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override of the IAKE iteration budget.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Override of the IAKE convergence threshold.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Also write `<name>.svg`.
    #[arg(long)]
    pub svg: bool,
    /// Input constraint variant of the corridor scenario (1 to 5).
    #[arg(long, value_name = "V")]
    pub version: Option<u8>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    manifest: &'a RunManifest,
    scenario: &'a str,
    converged: bool,
    iterations: usize,
    wall_time_s: f64,
    metrics: &'a BTreeMap<String, f64>,
    config: &'a ScenarioConfig,
}

/// Applies the command-line overrides and returns the seed the run uses.
fn apply_overrides(cfg: &mut ScenarioConfig, args: &RunArgs) -> anyhow::Result<u64> {
    if let Some(v) = args.version {
        match cfg {
            ScenarioConfig::Corridor(c) => c.version = v,
            _ => anyhow::bail!("--version applies only to the corridor scenario"),
        }
    }
    if let Some(n) = args.max_iters {
        cfg.iake_mut().max_iters = n;
    }
    if let Some(t) = args.tol {
        cfg.iake_mut().param_tol = t;
    }
    let mut seed = args.seed.unwrap_or(0);
    if let ScenarioConfig::Dac(c) = cfg {
        if let TargetWave::RandomBandLimited { seed: s } = &mut c.target {
            match args.seed {
                Some(given) => *s = given,
                None => seed = *s,
            }
        }
    }
    cfg.validate().context("invalid overrides")?;
    Ok(seed)
}

pub fn cmd_run(args: &RunArgs, verbose: bool) -> anyhow::Result<u8> {
    let (mut cfg, path) = output::load_config(&args.source)?;
    let seed = apply_overrides(&mut cfg, args)?;
    let manifest = RunManifest::new(path, seed, args.out_dir.clone());

    let start = Instant::now();
    let run = cfg
        .run(&mut |outer, inner, delta| {
            if verbose {
                eprintln!("outer {outer} iteration {inner}: max change {delta:.3e}");
            }
        })
        .with_context(|| format!("{} scenario failed", cfg.name()))?;
    let wall = start.elapsed().as_secs_f64();

    let summary = Summary {
        manifest: &manifest,
        scenario: cfg.name(),
        converged: run.converged,
        iterations: run.iterations,
        wall_time_s: wall,
        metrics: &run.metrics,
        config: &cfg,
    };
    let name = cfg.name();
    let mut files = vec![
        (format!("{name}_trace.csv"), output::trace_csv(&run).into_bytes()),
        (format!("{name}_summary.json"), serde_json::to_string_pretty(&summary)?.into_bytes()),
    ];
    if args.svg {
        files.push((format!("{name}.svg"), svg::render(&run).into_bytes()));
    }
    output::write_all(&args.out_dir, &files)?;

    eprintln!(
        "{name}: {} after {} iterations in {wall:.2} s",
        if run.converged { "converged" } else { "not converged" },
        run.iterations
    );
    Ok(if run.converged { 0 } else { EXIT_NOT_CONVERGED })
}
