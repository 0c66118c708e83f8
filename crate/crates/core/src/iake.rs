//! Iterative augmented Kalman estimation: alternate a smoothing pass under
//! the current NUV parameters with closed-form parameter updates, and an
//! optional outer relinearization loop for nonlinear models.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lssm::{PriorAttachment, PriorKind, Problem, Target};
use crate::mbf::{smooth, PosteriorRequest, SmoothResult, StepPriors};
use crate::priors::{self, Posterior, PriorParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IakeConfig {
    pub max_iters: usize,
    /// Convergence threshold on the largest change of any prior mean or
    /// variance between iterations, taken relative to the parameter's
    /// magnitude when that exceeds one.
    pub param_tol: f64,
    pub relinearize: bool,
    pub relin_max_outer: usize,
    /// Step toward the new trajectory, in (0, 1].
    pub relin_damping: f64,
    /// Outer-loop threshold on the largest change of the trajectory.
    pub relin_tol: f64,
    /// Relinearize after every single IAKE iteration instead of after inner
    /// convergence.
    pub relin_every_iteration: bool,
}

impl Default for IakeConfig {
    fn default() -> Self {
        IakeConfig {
            max_iters: 500,
            param_tol: 1e-8,
            relinearize: false,
            relin_max_outer: 50,
            relin_damping: 1.0,
            relin_tol: 1e-8,
            relin_every_iteration: false,
        }
    }
}

impl IakeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.param_tol > 0.0) {
            return Err(Error::contract("IAKE needs max_iters >= 1 and param_tol > 0"));
        }
        if !(self.relin_damping > 0.0 && self.relin_damping <= 1.0) {
            return Err(Error::contract("relinearization damping must lie in (0, 1]"));
        }
        if self.relinearize && (self.relin_max_outer == 0 || !(self.relin_tol > 0.0)) {
            return Err(Error::contract("relinearization needs relin_max_outer >= 1 and relin_tol > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IakeResult {
    pub u_hat: Vec<DVector<f64>>,
    pub y_hat: Vec<DVector<f64>>,
    pub x_hat: Vec<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest parameter change of each iteration.
    pub history: Vec<f64>,
    /// Final prior parameters, one per attachment.
    pub params: Vec<PriorParams>,
}

/// Builds the per-step Gaussian priors from the current parameters.
pub fn step_priors(problem: &Problem, params: &[PriorParams]) -> Vec<StepPriors> {
    let m = &problem.model;
    let l = m.input_dim();
    let mut out: Vec<StepPriors> = (0..m.horizon())
        .map(|_| StepPriors::inputs(DVector::zeros(l), DVector::from_element(l, 1.0)))
        .collect();
    for (att, p) in problem.attachments.iter().zip(params) {
        match att.target {
            Target::Input { k, l } => {
                out[k].input_mean[l] = p.fwd_mean;
                out[k].input_var[l] = p.fwd_variance;
            }
            Target::Output { k, h } => {
                let s = std::mem::replace(&mut out[k], StepPriors::inputs(DVector::zeros(0), DVector::zeros(0)));
                out[k] = s.with_output(h, p.fwd_mean, p.fwd_variance);
            }
        }
    }
    out
}

fn posterior_of(att: &PriorAttachment, res: &SmoothResult) -> Posterior {
    let (mean, var) = match att.target {
        Target::Input { k, l } => (res.u_mean[k][l], res.u_var.as_ref().map(|v| v[k][l])),
        Target::Output { k, h } => (res.y_mean[k][h], res.y_var.as_ref().map(|v| v[k][h])),
    };
    Posterior::new(mean, var.unwrap_or(0.0))
}

fn needs_variances(problem: &Problem) -> PosteriorRequest {
    let mut req = PosteriorRequest::default();
    for att in &problem.attachments {
        if let PriorKind::Nuv { spec } = att.prior {
            if spec.needs_posterior_variance() {
                match att.target {
                    Target::Input { .. } => req.input_var = true,
                    Target::Output { .. } => req.output_var = true,
                }
            }
        }
    }
    req
}

pub fn iake_solve(problem: &Problem, cfg: &IakeConfig) -> Result<IakeResult> {
    iake_solve_with(problem, cfg, None, &mut |_, _| {})
}

/// Runs IAKE, optionally starting from given parameters (one per
/// attachment), and reports `(iteration, max parameter change)` after each
/// iteration.
pub fn iake_solve_with(
    problem: &Problem,
    cfg: &IakeConfig,
    init: Option<&[PriorParams]>,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<IakeResult> {
    cfg.validate()?;
    problem.validate()?;
    let mut params: Vec<PriorParams> = match init {
        Some(p) if p.len() == problem.attachments.len() => p.to_vec(),
        Some(_) => return Err(Error::contract("initial parameters must match the attachments")),
        None => problem.attachments.iter().map(|a| a.initial_params()).collect(),
    };
    let req = needs_variances(problem);
    let mut history = Vec::new();
    let mut converged = false;
    let mut last = None;
    let mut iterations = 0;
    for i in 1..=cfg.max_iters {
        let sp = step_priors(problem, &params);
        let res = smooth(&problem.model, &problem.bc, &sp, req)
            .map_err(|e| Error::Iteration { iteration: i, source: Box::new(e) })?;
        let mut delta: f64 = 0.0;
        for (att, p) in problem.attachments.iter().zip(params.iter_mut()) {
            let PriorKind::Nuv { spec } = att.prior else { continue };
            let post = posterior_of(att, &res);
            if !post.mean.is_finite() {
                return Err(Error::NonFinite { iteration: i, what: format!("posterior mean of {:?}", att.target) });
            }
            let new = priors::update(&spec, post)?;
            if !new.is_finite() {
                return Err(Error::NonFinite { iteration: i, what: format!("prior parameters of {:?}", att.target) });
            }
            delta = delta.max(new.scaled_diff(p));
            *p = new;
        }
        history.push(delta);
        progress(i, delta);
        last = Some(res);
        iterations = i;
        if delta < cfg.param_tol {
            converged = true;
            break;
        }
    }
    let res = last.expect("at least one iteration");
    Ok(IakeResult {
        u_hat: res.u_mean,
        y_hat: res.y_mean,
        x_hat: res.x_mean,
        iterations,
        converged,
        history,
        params,
    })
}

/// State and input trajectory used as a linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.x
            .iter()
            .zip(&other.x)
            .chain(self.u.iter().zip(&other.u))
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }

    /// `(1 - lambda) self + lambda other`.
    pub fn blend(&self, other: &Trajectory, lambda: f64) -> Trajectory {
        let mix = |a: &[DVector<f64>], b: &[DVector<f64>]| {
            a.iter().zip(b).map(|(p, q)| p * (1.0 - lambda) + q * lambda).collect()
        };
        Trajectory { x: mix(&self.x, &other.x), u: mix(&self.u, &other.u) }
    }
}

/// A nonlinear problem that can be linearized around a trajectory.
pub trait Relinearize {
    /// Affine problem valid near `traj`. Attachments must keep the same
    /// layout across calls so that parameters can be carried over.
    fn linearize(&self, traj: &Trajectory) -> Result<Problem>;

    /// Linearization point implied by a solution of the linearized problem.
    fn trajectory_from(&self, problem: &Problem, res: &IakeResult) -> Trajectory;
}

#[derive(Debug, Clone)]
pub struct RelinResult {
    pub result: IakeResult,
    /// The last linearized problem.
    pub problem: Problem,
    pub trajectory: Trajectory,
    pub outer_iterations: usize,
    pub converged: bool,
    pub damping: f64,
    /// Trajectory change of each outer iteration.
    pub outer_history: Vec<f64>,
}

/// Outer loop: linearize at the current trajectory, solve with IAKE
/// (warm-started from the previous parameters), and move the trajectory
/// toward the new solution. Falls back to half-steps once if the
/// trajectory change grows.
pub fn relinearized_solve<S: Relinearize + ?Sized>(
    sys: &S,
    init: Trajectory,
    cfg: &IakeConfig,
    progress: &mut dyn FnMut(usize, usize, f64),
) -> Result<RelinResult> {
    cfg.validate()?;
    let mut inner = *cfg;
    if cfg.relin_every_iteration {
        inner.max_iters = 1;
    }
    let mut lambda = cfg.relin_damping;
    let mut traj = init;
    let mut params: Option<Vec<PriorParams>> = None;
    let mut prev_change = f64::INFINITY;
    let mut history = Vec::new();
    let mut out = None;
    for outer in 1..=cfg.relin_max_outer {
        let problem = sys.linearize(&traj).map_err(|e| match e {
            Error::Linearization { stage, what, .. } => Error::Linearization { stage, outer, what },
            other => other,
        })?;
        let res = iake_solve_with(&problem, &inner, params.as_deref(), &mut |i, d| progress(outer, i, d))?;
        let new_traj = sys.trajectory_from(&problem, &res);
        let change = traj.max_abs_diff(&new_traj);
        history.push(change);
        if change > prev_change && lambda == 1.0 {
            lambda = 0.5;
        }
        prev_change = change;
        traj = traj.blend(&new_traj, lambda);
        params = Some(res.params.clone());
        let done = change < cfg.relin_tol && (!cfg.relin_every_iteration || res.converged);
        out = Some(RelinResult {
            result: res,
            problem,
            trajectory: traj.clone(),
            outer_iterations: outer,
            converged: done,
            damping: lambda,
            outer_history: Vec::new(),
        });
        if done {
            break;
        }
    }
    let mut r = out.expect("at least one outer iteration");
    r.outer_history = history;
    Ok(r)
}
