//! Binary-input control of a third-order low-pass filter (a digital-to-analog
//! converter): find `u_k in {0, 1}` so that the filter output follows a
//! target waveform.

use nalgebra::{dmatrix, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iake::{iake_solve_with, IakeConfig, IakeResult};
use crate::lssm::{BoundaryCond, Lssm, PriorAttachment, Problem, Target};
use crate::priors::NuvSpec;

use super::{Band, ScenarioRun};

/// Largest horizon accepted by [`exhaustive_binary_oracle`].
pub const MAX_EXHAUSTIVE_HORIZON: usize = 14;

pub fn dac_matrices() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    (
        dmatrix![
            0.7967, -6.3978, -94.2123;
            0.0027, 0.9902, -0.1467;
            0.0, 0.0030, 0.9999
        ],
        dmatrix![0.0027; 0.0; 0.0],
        dmatrix![0.0, 0.0, 35037.9],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetWave {
    /// `offset - amplitude cos(2 pi k / period)` before `step_at`, then
    /// `offset - amplitude cos(2 pi k / fast_period)` up to `step_at2`, then
    /// a constant `step_level`.
    SineStep {
        offset: f64,
        amplitude: f64,
        period: f64,
        step_at: usize,
        fast_period: f64,
        step_at2: usize,
        step_level: f64,
    },
    Samples { values: Vec<f64> },
    /// Seeded [`random_band_limited_target`].
    RandomBandLimited { seed: u64 },
}

impl Default for TargetWave {
    fn default() -> Self {
        TargetWave::SineStep {
            offset: 0.4,
            amplitude: 0.4,
            period: 150.0,
            step_at: 225,
            fast_period: 12.0,
            step_at2: 340,
            step_level: 0.7,
        }
    }
}

impl TargetWave {
    pub fn sample(&self, horizon: usize) -> Result<Vec<f64>> {
        match self {
            TargetWave::SineStep { offset, amplitude, period, step_at, fast_period, step_at2, step_level } => {
                let tau = 2.0 * std::f64::consts::PI;
                Ok((0..horizon)
                    .map(|k| {
                        if k < *step_at {
                            offset - amplitude * (tau * k as f64 / period).cos()
                        } else if k < *step_at2 {
                            offset - amplitude * (tau * k as f64 / fast_period).cos()
                        } else {
                            *step_level
                        }
                    })
                    .collect())
            }
            TargetWave::Samples { values } => {
                if values.len() != horizon {
                    return Err(Error::contract(format!(
                        "target has {} samples, horizon is {horizon}",
                        values.len()
                    )));
                }
                Ok(values.clone())
            }
            TargetWave::RandomBandLimited { seed } => {
                Ok(random_band_limited_target(&mut ChaCha8Rng::seed_from_u64(*seed), horizon))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DacConfig {
    pub horizon: usize,
    /// Output prior variance; scales the weight of the tracking error.
    pub output_variance: f64,
    pub target: TargetWave,
    pub iake: IakeConfig,
}

impl Default for DacConfig {
    fn default() -> Self {
        DacConfig {
            horizon: 450,
            output_variance: 0.045,
            target: TargetWave::default(),
            iake: IakeConfig::default(),
        }
    }
}

/// DAC problem over `target.len()` steps starting from state `x0`.
pub fn dac_problem(target: &[f64], output_variance: f64, x0: &DVector<f64>) -> Result<Problem> {
    if target.is_empty() {
        return Err(Error::contract("empty target"));
    }
    if !(output_variance > 0.0) {
        return Err(Error::contract("output variance must be positive"));
    }
    let (a, b, c) = dac_matrices();
    let model = Lssm::constant(target.len(), a, b, c)?;
    let mut attachments = Vec::with_capacity(2 * target.len());
    for (k, &t) in target.iter().enumerate() {
        attachments.push(PriorAttachment::nuv(Target::Input { k, l: 0 }, NuvSpec::binarizing_em(0.0, 1.0)));
        attachments.push(PriorAttachment::fixed(Target::Output { k, h: 0 }, t, output_variance));
    }
    Ok(Problem { model, bc: BoundaryCond::pinned_start(x0.clone()), attachments })
}

pub fn build_dac(cfg: &DacConfig) -> Result<Problem> {
    let target = cfg.target.sample(cfg.horizon)?;
    dac_problem(&target, cfg.output_variance, &DVector::zeros(3))
}

/// Output of the DAC filter started at `x0` for input `u`.
pub fn dac_response(x0: &DVector<f64>, u: &[f64]) -> Vec<f64> {
    let (a, b, c) = dac_matrices();
    let mut x = x0.clone();
    u.iter()
        .map(|&uk| {
            x = &a * &x + &b * uk;
            (&c * &x)[0]
        })
        .collect()
}

pub fn mse(y: &[f64], target: &[f64]) -> f64 {
    y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

/// Globally optimal binary input sequence by enumeration of all `2^K`
/// candidates, for a model with a single input and a single output.
/// Returns `(u*, mse*)`.
pub fn exhaustive_binary_oracle(m: &Lssm, x0: &DVector<f64>, target: &[f64]) -> Result<(Vec<f64>, f64)> {
    let kk = m.horizon();
    if kk > MAX_EXHAUSTIVE_HORIZON {
        return Err(Error::Oracle(format!(
            "exhaustive search over 2^{kk} inputs refused (limit K = {MAX_EXHAUSTIVE_HORIZON})"
        )));
    }
    if m.input_dim() != 1 || m.output_dim() != 1 || target.len() != kk {
        return Err(Error::contract("exhaustive oracle needs a single-input single-output model matching the target"));
    }
    let mut best = (Vec::new(), f64::INFINITY);
    for bits in 0u32..(1 << kk) {
        let u: Vec<DVector<f64>> = (0..kk).map(|k| DVector::from_element(1, ((bits >> k) & 1) as f64)).collect();
        let (_, ys) = m.simulate(x0, &u);
        let y: Vec<f64> = ys.iter().map(|v| v[0]).collect();
        let e = mse(&y, target);
        if e < best.1 {
            best = (u.iter().map(|v| v[0]).collect(), e);
        }
    }
    Ok(best)
}

/// Random smooth target: a sum of three sinusoids with periods between 20
/// and 80 samples, scaled into `[0.1, 0.8]`.
pub fn random_band_limited_target<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..1.0),
                rng.random_range(20.0..80.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..len)
        .map(|k| comps.iter().map(|(a, p, ph)| a * (std::f64::consts::TAU * k as f64 / p + ph).sin()).sum())
        .collect();
    let total: f64 = comps.iter().map(|c| c.0).sum();
    raw.iter().map(|r| 0.45 + 0.35 * r / total).collect()
}

/// One short-horizon comparison: the state at the start of the window comes
/// from a long warm-up solve on the preceding part of the target; IAKE and
/// exhaustive search then optimize the same `window` steps. Returns
/// `(mse_iake, mse_optimal)` with the IAKE input rounded to `{0, 1}`.
pub fn short_horizon_comparison(
    target: &[f64],
    warmup: usize,
    window: usize,
    output_variance: f64,
    cfg: &IakeConfig,
) -> Result<(f64, f64)> {
    if warmup + window > target.len() || window == 0 {
        return Err(Error::contract("target too short for warm-up and window"));
    }
    let x0 = if warmup > 0 {
        let warm = dac_problem(&target[..warmup], output_variance, &DVector::zeros(3))?;
        let r = iake_solve_with(&warm, cfg, None, &mut |_, _| {})?;
        let u: Vec<f64> = r.u_hat.iter().map(|v| v[0].round().clamp(0.0, 1.0)).collect();
        final_state(&DVector::zeros(3), &u)
    } else {
        DVector::zeros(3)
    };
    let tw = &target[warmup..warmup + window];
    let p = dac_problem(tw, output_variance, &x0)?;
    let r = iake_solve_with(&p, cfg, None, &mut |_, _| {})?;
    let u: Vec<f64> = r.u_hat.iter().map(|v| v[0].round().clamp(0.0, 1.0)).collect();
    let mse_iake = mse(&dac_response(&x0, &u), tw);
    let (_, mse_opt) = exhaustive_binary_oracle(&p.model, &x0, tw)?;
    Ok((mse_iake, mse_opt))
}

fn final_state(x0: &DVector<f64>, u: &[f64]) -> DVector<f64> {
    let (a, b, _) = dac_matrices();
    u.iter().fold(x0.clone(), |x, &uk| &a * x + &b * uk)
}

/// How the short-horizon controller picks each window's inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSolver {
    Iake,
    Exhaustive,
}

/// Receding-horizon control: at each step solve over the next `window`
/// samples from the current state, apply the first `commit` rounded inputs,
/// and slide forward by `commit`.
pub fn online_control(
    target: &[f64],
    window: usize,
    commit: usize,
    output_variance: f64,
    solver: WindowSolver,
    cfg: &IakeConfig,
) -> Result<Vec<f64>> {
    if window == 0 || commit == 0 || commit > window {
        return Err(Error::contract("online control needs 1 <= commit <= window"));
    }
    let mut x = DVector::zeros(3);
    let mut u_all = Vec::with_capacity(target.len());
    let mut t = 0;
    while t < target.len() {
        let w = window.min(target.len() - t);
        let tw = &target[t..t + w];
        let u: Vec<f64> = match solver {
            WindowSolver::Iake => {
                let p = dac_problem(tw, output_variance, &x)?;
                let r = iake_solve_with(&p, cfg, None, &mut |_, _| {})?;
                r.u_hat.iter().map(|v| v[0].round().clamp(0.0, 1.0)).collect()
            }
            WindowSolver::Exhaustive => {
                let (a, b, c) = dac_matrices();
                let m = Lssm::constant(w, a, b, c)?;
                exhaustive_binary_oracle(&m, &x, tw)?.0
            }
        };
        let n = commit.min(w);
        x = final_state(&x, &u[..n]);
        u_all.extend_from_slice(&u[..n]);
        t += n;
    }
    Ok(u_all)
}

pub fn run_dac(cfg: &DacConfig, progress: &mut dyn FnMut(usize, f64)) -> Result<ScenarioRun> {
    let target = cfg.target.sample(cfg.horizon)?;
    let p = dac_problem(&target, cfg.output_variance, &DVector::zeros(3))?;
    let r: IakeResult = iake_solve_with(&p, &cfg.iake, None, progress)?;
    let u: Vec<f64> = r.u_hat.iter().map(|v| v[0]).collect();
    let max_level_dist = u.iter().map(|&v| v.abs().min((v - 1.0).abs())).fold(0.0, f64::max);
    let rounded: Vec<f64> = u.iter().map(|v| v.round().clamp(0.0, 1.0)).collect();
    let y = dac_response(&DVector::zeros(3), &rounded);
    let mut run = ScenarioRun::from_result("dac", &r, vec!["u".into()], vec!["y".into()]);
    run.metrics.insert("max_distance_to_level".into(), max_level_dist);
    run.metrics.insert("mse_rounded".into(), mse(&y, &target));
    run.bands.push(Band { output: 0, lower: target.clone(), upper: target, label: "target".into() });
    Ok(run)
}
