//! Corridor control: keep the output of a triple-integrator-like plant inside
//! a corridor around a target, under five different input penalties.
//!
//! 1. Gaussian (L2) input penalty.
//! 2. Input increments bounded below (half-space prior on the increment).
//! 3. Sparse input (plain NUV).
//! 4. Input restricted to the levels `{-1, 0, 1}`.
//! 5. Sparse input increments (plain NUV on the increment).

use nalgebra::{dmatrix, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iake::{iake_solve_with, IakeConfig};
use crate::lssm::{
    augment_derivative_bc, augment_derivative_input, expand_input_levels, BoundaryCond, Lssm,
    PriorAttachment, Problem, Target,
};
use crate::priors::{expand_m_level, NuvSpec};

use super::{Band, ScenarioRun};

pub fn corridor_matrices() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    (
        dmatrix![
            1.0, 0.0, 0.0;
            1.0, 1.0, 0.0;
            0.5, 1.0, 1.0
        ],
        dmatrix![1.0; 0.5; 1.0 / 3.0] * 0.0015,
        dmatrix![0.0, 0.0, 1.0],
    )
}

/// From step `start` on, the corridor is `[target + lower, target + upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorridorSegment {
    pub start: usize,
    pub target: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorConfig {
    /// Input constraint variant, 1 to 5.
    pub version: u8,
    pub horizon: usize,
    /// Slope parameter of the output box prior.
    pub gamma_out: f64,
    /// Prior variance of the input in version 1.
    pub input_variance: f64,
    /// Lower bound on the input increment in version 2.
    pub increment_bound: f64,
    /// Slope parameter of the increment half-space prior in version 2.
    pub gamma_in: f64,
    /// Input levels in version 4.
    pub levels: Vec<f64>,
    pub segments: Vec<CorridorSegment>,
    pub iake: IakeConfig,
}

/// Iteration budget of the scenario; the sparsifying and discretizing
/// versions approach their fixed points only sublinearly.
pub const DEFAULT_MAX_ITERS: usize = 20_000;

impl Default for CorridorConfig {
    fn default() -> Self {
        let seg = |start, target| CorridorSegment { start, target, lower: -1.0, upper: 1.0 };
        CorridorConfig {
            version: 1,
            horizon: 175,
            gamma_out: 10.0,
            input_variance: 10.0,
            increment_bound: -0.03,
            gamma_in: 10.0,
            levels: vec![-1.0, 0.0, 1.0],
            segments: vec![seg(0, 0.0), seg(40, 1.5), seg(95, 0.5), seg(140, 2.0)],
            iake: IakeConfig { max_iters: DEFAULT_MAX_ITERS, ..Default::default() },
        }
    }
}

impl CorridorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.version) {
            return Err(Error::contract(format!("unknown corridor version {}", self.version)));
        }
        if self.horizon == 0 {
            return Err(Error::contract("corridor horizon must be positive"));
        }
        if self.segments.is_empty() || self.segments[0].start != 0 {
            return Err(Error::contract("corridor segments must start at step 0"));
        }
        if self.segments.windows(2).any(|w| w[1].start <= w[0].start) {
            return Err(Error::contract("corridor segments must have increasing starts"));
        }
        if self.segments.iter().any(|s| !(s.lower <= s.upper)) {
            return Err(Error::contract("corridor segment with lower > upper"));
        }
        Ok(())
    }

    /// `(target, lower, upper)` per step, bounds absolute.
    pub fn corridor(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut t = Vec::with_capacity(self.horizon);
        let mut lo = Vec::with_capacity(self.horizon);
        let mut hi = Vec::with_capacity(self.horizon);
        for k in 0..self.horizon {
            let s = self.segments.iter().rev().find(|s| s.start <= k).expect("segment at 0");
            t.push(s.target);
            lo.push(s.target + s.lower);
            hi.push(s.target + s.upper);
        }
        (t, lo, hi)
    }
}

fn base_model(cfg: &CorridorConfig) -> Result<Lssm> {
    let (a, b, c) = corridor_matrices();
    Lssm::constant(cfg.horizon, a, b, c)
}

pub fn build_corridor(cfg: &CorridorConfig) -> Result<Problem> {
    cfg.validate()?;
    let base = base_model(cfg)?;
    let bc0 = BoundaryCond::pinned_start(DVector::zeros(3));
    let kk = cfg.horizon;
    let (model, bc, mut atts) = match cfg.version {
        1 => {
            let atts = (0..kk)
                .map(|k| PriorAttachment::fixed(Target::Input { k, l: 0 }, 0.0, cfg.input_variance))
                .collect();
            (base, bc0, atts)
        }
        2 | 5 => {
            let m = augment_derivative_input(&base)?;
            let bc = augment_derivative_bc(&bc0, 0.0, crate::lssm::TINY_VARIANCE);
            let spec = if cfg.version == 2 {
                NuvSpec::half_space_lower(cfg.increment_bound, cfg.gamma_in)
            } else {
                NuvSpec::plain()
            };
            let atts = (0..kk).map(|k| PriorAttachment::nuv(Target::Input { k, l: 0 }, spec)).collect();
            (m, bc, atts)
        }
        3 => {
            let atts = (0..kk)
                .map(|k| PriorAttachment::nuv(Target::Input { k, l: 0 }, NuvSpec::plain()))
                .collect();
            (base, bc0, atts)
        }
        4 => {
            let exp = expand_m_level(&cfg.levels, false)?;
            let m = expand_input_levels(&base, 0, &exp)?;
            let mut atts = Vec::new();
            for k in 0..kk {
                for j in 0..exp.num_binaries() {
                    atts.push(
                        PriorAttachment::nuv(Target::Input { k, l: j }, exp.binary_spec())
                            .with_init(exp.initial_params(j)),
                    );
                }
            }
            (m, bc0, atts)
        }
        _ => unreachable!("validated"),
    };
    let (_, lo, hi) = cfg.corridor();
    for k in 0..kk {
        atts.push(PriorAttachment::nuv(Target::Output { k, h: 0 }, NuvSpec::box_prior(lo[k], hi[k], cfg.gamma_out)));
    }
    Ok(Problem { model, bc, attachments: atts })
}

/// Effective plant input per step, recovered from a solution of the
/// version's problem.
pub fn plant_input(cfg: &CorridorConfig, u_hat: &[DVector<f64>], x_hat: &[DVector<f64>]) -> Result<Vec<f64>> {
    Ok(match cfg.version {
        1 | 3 => u_hat.iter().map(|v| v[0]).collect(),
        // the augmented state carries the running input
        2 | 5 => x_hat.iter().map(|x| x[0]).collect(),
        4 => {
            let exp = expand_m_level(&cfg.levels, false)?;
            u_hat.iter().map(|v| exp.combine(v.as_slice())).collect()
        }
        _ => return Err(Error::contract("unknown corridor version")),
    })
}

pub fn run_corridor(cfg: &CorridorConfig, progress: &mut dyn FnMut(usize, f64)) -> Result<ScenarioRun> {
    let p = build_corridor(cfg)?;
    let r = iake_solve_with(&p, &cfg.iake, None, progress)?;
    let u = plant_input(cfg, &r.u_hat, &r.x_hat)?;
    let (target, lo, hi) = cfg.corridor();
    let y: Vec<f64> = r.y_hat.iter().map(|v| v[0]).collect();
    let violation = (0..cfg.horizon)
        .map(|k| (lo[k] - y[k]).max(y[k] - hi[k]).max(0.0))
        .fold(0.0, f64::max);

    let mut run = ScenarioRun::from_result("corridor", &r, vec!["u".into()], vec!["y".into()]);
    run.u = u.iter().map(|&v| DVector::from_element(1, v)).collect();
    if matches!(cfg.version, 2 | 5) {
        run.u_labels.push("du".into());
        for (uk, du) in run.u.iter_mut().zip(&r.u_hat) {
            *uk = DVector::from_vec(vec![uk[0], du[0]]);
        }
        let du: Vec<f64> = r.u_hat.iter().map(|v| v[0]).collect();
        run.metrics.insert("min_increment".into(), du.iter().copied().fold(f64::INFINITY, f64::min));
        run.metrics.insert("nonzero_increments".into(), count_nonzero(&du, NONZERO_TOL) as f64);
    }
    if cfg.version == 3 {
        run.metrics.insert("nonzero_inputs".into(), count_nonzero(&u, NONZERO_TOL) as f64);
    }
    if cfg.version == 4 {
        let d = u
            .iter()
            .map(|v| cfg.levels.iter().map(|l| (v - l).abs()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max);
        run.metrics.insert("max_distance_to_level".into(), d);
    }
    run.metrics.insert("corridor_violation".into(), violation);
    run.bands.push(Band { output: 0, lower: lo, upper: hi, label: "corridor".into() });
    run.bands.push(Band { output: 0, lower: target.clone(), upper: target, label: "target".into() });
    Ok(run)
}

/// Magnitude below which an input (or increment) counts as zero.
pub const NONZERO_TOL: f64 = 1e-4;

pub fn count_nonzero(v: &[f64], tol: f64) -> usize {
    v.iter().filter(|x| x.abs() > tol).count()
}
