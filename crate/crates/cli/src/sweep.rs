//! `scalar-sweep`: the scalar AM/EM loop over a grid of likelihoods.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use nuvmpc::priors::{NuvSpec, PriorParams};
use nuvmpc::scalar_lab::{run_scalar, ScalarLikelihood, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use rayon::prelude::*;

use crate::output::{self, fmt_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorKind {
    Box,
    HalfSpaceLower,
    HalfSpaceUpper,
    BinarizingAm,
    BinarizingEm,
}

/// `start:stop:count`, inclusive of both ends; `count` may be 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuRange {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl MuRange {
    pub fn points(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![self.start],
            n => (0..n).map(|i| self.start + (self.stop - self.start) * i as f64 / (n - 1) as f64).collect(),
        }
    }
}

impl FromStr for MuRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, n] = parts.as_slice() else {
            return Err(format!("expected start:stop:count, got {s:?}"));
        };
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
        let (start, stop) = (num(a)?, num(b)?);
        if !(start.is_finite() && stop.is_finite()) || stop < start {
            return Err(format!("need finite start <= stop, got {s:?}"));
        }
        let count = n.trim().parse::<usize>().map_err(|e| format!("{n:?}: {e}"))?;
        Ok(MuRange { start, stop, count })
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub prior: PriorKind,
    /// Lower bound, or the bound of a half-space.
    #[arg(long, allow_hyphen_values = true)]
    pub a: f64,
    /// Upper bound; unused by half-spaces.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub b: f64,
    /// Slope outside the admissible set (box and half-space).
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Likelihood variances, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub s2: Vec<f64>,
    /// Likelihood means as `start:stop:count`.
    #[arg(long, allow_hyphen_values = true, default_value = "-1:2:301")]
    pub mu: MuRange,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Directory for `scalar_sweep.csv`.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out_dir: PathBuf,
}

fn spec(args: &SweepArgs) -> NuvSpec {
    let (a, b, g) = (args.a, args.b, args.gamma);
    match args.prior {
        PriorKind::Box => NuvSpec::box_prior(a, b, g),
        PriorKind::HalfSpaceLower => NuvSpec::half_space_lower(a, g),
        PriorKind::HalfSpaceUpper => NuvSpec::half_space_upper(a, g),
        PriorKind::BinarizingAm => NuvSpec::binarizing_am(a, b),
        PriorKind::BinarizingEm => NuvSpec::binarizing_em(a, b),
    }
}

/// CSV with columns `mu, s2, x_hat, iterations, converged`, ordered by
/// `s2` and then `mu`.
pub fn sweep_csv(args: &SweepArgs) -> anyhow::Result<String> {
    let spec = spec(args);
    spec.validate()?;
    anyhow::ensure!(args.s2.iter().all(|&v| v > 0.0 && v.is_finite()), "s2 values must be positive");
    let mus = args.mu.points();
    let grid: Vec<(f64, f64)> = args.s2.iter().flat_map(|&s2| mus.iter().map(move |&mu| (mu, s2))).collect();
    let rows = grid
        .par_iter()
        .map(|&(mu, s2)| {
            let t = run_scalar(&spec, ScalarLikelihood::new(mu, s2), PriorParams::new(0.0, 1.0), args.max_iters, args.tol)?;
            let x = t.final_estimate().unwrap_or(f64::NAN);
            Ok(format!("{},{},{},{},{}\n", fmt_f64(mu), fmt_f64(s2), fmt_f64(x), t.iterations, t.converged))
        })
        .collect::<nuvmpc::Result<Vec<String>>>()?;
    let mut out = String::from("mu,s2,x_hat,iterations,converged\n");
    out.extend(rows);
    Ok(out)
}

pub fn cmd_scalar_sweep(args: &SweepArgs) -> anyhow::Result<u8> {
    let csv = sweep_csv(args)?;
    output::write_all(&args.out_dir, &[("scalar_sweep.csv".into(), csv.into_bytes())])?;
    Ok(0)
}
