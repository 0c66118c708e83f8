//! Planar trajectory planning around obstacles.
//!
//! A point mass with acceleration input moves from a pinned start to a
//! pinned end at rest, minimizing the input energy. Each obstacle adds one
//! output `z_k = f(y_k)` (a distance-like function of the position) with a
//! half-space prior `z_k > threshold`. The output is linearized around the
//! previous trajectory and the problem is solved with relinearization.

use std::f64::consts::PI;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iake::{iake_solve, relinearized_solve, IakeConfig, IakeResult, Relinearize, Trajectory};
use crate::lssm::{linearize_trajectory, BoundaryCond, NonlinearStage, PriorAttachment, Problem, Target, TINY_VARIANCE};
use crate::priors::NuvSpec;

use super::ScenarioRun;

/// Exponent of the superellipse used as a smooth maximum for rectangles.
pub const RECTANGLE_SHARPNESS: f64 = 8.0;

/// Obstacle shape with a distance-like function `f` and a threshold: the
/// free space is `f(y) > threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Obstacle {
    Circle { center: [f64; 2], radius: f64 },
    /// Semi-axes along the rotated coordinate axes; `angle` in radians.
    Ellipse { center: [f64; 2], semi_axes: [f64; 2], angle: f64 },
    /// Half side lengths; corners are rounded by a smooth maximum.
    Rectangle { center: [f64; 2], half_sizes: [f64; 2], angle: f64 },
}

impl Obstacle {
    fn center(&self) -> [f64; 2] {
        match self {
            Obstacle::Circle { center, .. } | Obstacle::Ellipse { center, .. } | Obstacle::Rectangle { center, .. } => {
                *center
            }
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Obstacle::Circle { radius, .. } => *radius,
            _ => 1.0,
        }
    }

    /// Offset from the center in the obstacle's own axes, scaled by the
    /// semi-axes (identity scaling for circles).
    fn local(&self, y: &[f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        let c = self.center();
        let d = [y[0] - c[0], y[1] - c[1]];
        let (angle, s) = match self {
            Obstacle::Circle { .. } => (0.0, [1.0, 1.0]),
            Obstacle::Ellipse { semi_axes, angle, .. } => (*angle, *semi_axes),
            Obstacle::Rectangle { half_sizes, angle, .. } => (*angle, *half_sizes),
        };
        let (sn, cs) = angle.sin_cos();
        // rows of R^T scaled: q = S^-1 R^T d
        let m = [[cs / s[0], sn / s[0]], [-sn / s[1], cs / s[1]]];
        ([m[0][0] * d[0] + m[0][1] * d[1], m[1][0] * d[0] + m[1][1] * d[1]], m)
    }

    pub fn value(&self, y: &[f64; 2]) -> f64 {
        let (q, _) = self.local(y);
        match self {
            Obstacle::Rectangle { .. } => {
                let p = RECTANGLE_SHARPNESS;
                (q[0].abs().powf(p) + q[1].abs().powf(p)).powf(1.0 / p)
            }
            _ => q[0].hypot(q[1]),
        }
    }

    pub fn gradient(&self, y: &[f64; 2]) -> [f64; 2] {
        let (q, m) = self.local(y);
        let f = self.value(y);
        if f == 0.0 {
            return [0.0, 0.0];
        }
        let dq = match self {
            Obstacle::Rectangle { .. } => {
                let p = RECTANGLE_SHARPNESS;
                let g = |v: f64| v.signum() * v.abs().powf(p - 1.0) * f.powf(1.0 - p);
                [g(q[0]), g(q[1])]
            }
            _ => [q[0] / f, q[1] / f],
        };
        [dq[0] * m[0][0] + dq[1] * m[1][0], dq[0] * m[0][1] + dq[1] * m[1][1]]
    }

    /// Closed polyline of the boundary `f = threshold`.
    pub fn outline(&self, points: usize) -> Vec<(f64, f64)> {
        let c = self.center();
        (0..=points)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / points as f64;
                let (st, ct) = t.sin_cos();
                let (q, s, angle) = match self {
                    Obstacle::Circle { radius, .. } => ([ct * radius, st * radius], [1.0, 1.0], 0.0),
                    Obstacle::Ellipse { semi_axes, angle, .. } => ([ct, st], *semi_axes, *angle),
                    Obstacle::Rectangle { half_sizes, angle, .. } => {
                        let p = RECTANGLE_SHARPNESS;
                        let n = (ct.abs().powf(p) + st.abs().powf(p)).powf(1.0 / p);
                        ([ct / n, st / n], *half_sizes, *angle)
                    }
                };
                let (sn, cs) = angle.sin_cos();
                let (a, b) = (q[0] * s[0], q[1] * s[1]);
                (c[0] + cs * a - sn * b, c[1] + sn * a + cs * b)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Obstacle::Circle { radius, .. } => *radius >= 0.0,
            Obstacle::Ellipse { semi_axes, .. } => semi_axes.iter().all(|&s| s > 0.0),
            Obstacle::Rectangle { half_sizes, .. } => half_sizes.iter().all(|&s| s > 0.0),
        };
        let finite = self.center().iter().all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(Error::contract(format!("malformed obstacle {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstacleConfig {
    pub horizon: usize,
    pub sample_time: f64,
    /// Slope parameter of the half-space priors.
    pub gamma: f64,
    /// Prior variance of each acceleration component.
    pub input_variance: f64,
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    /// Lateral offset of the initial path at mid-horizon; breaks the
    /// symmetry of paths aimed straight at an obstacle.
    pub initial_bump: f64,
    pub iake: IakeConfig,
}

// Inactive half-space priors anchor the output at its previous value with
// variance |z - r| / gamma, so the inner iteration contracts only linearly
// with a rate close to one; a tight parameter tolerance is needed for the
// solution to settle to 1e-8.
impl Default for ObstacleConfig {
    fn default() -> Self {
        ObstacleConfig {
            horizon: 30,
            sample_time: 1.0,
            gamma: 5.0,
            input_variance: 0.1,
            start: [0.0, 0.0],
            end: [3.0, 3.0],
            obstacles: vec![Obstacle::Circle { center: [1.5, 1.5], radius: 0.75 }],
            initial_bump: 0.5,
            iake: IakeConfig {
                max_iters: 50_000,
                param_tol: 1e-13,
                relinearize: true,
                relin_max_outer: 100,
                ..Default::default()
            },
        }
    }
}

impl ObstacleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::contract("obstacle horizon must be at least 2"));
        }
        if !(self.sample_time > 0.0 && self.gamma > 0.0 && self.input_variance > 0.0) {
            return Err(Error::contract("sample time, gamma and input variance must be positive"));
        }
        for o in &self.obstacles {
            o.validate()?;
            for (name, p) in [("start", self.start), ("end", self.end)] {
                if o.value(&p) <= o.threshold() {
                    return Err(Error::Geometry(format!("{name} point {p:?} lies inside obstacle {o:?}")));
                }
            }
        }
        Ok(())
    }

    /// `(A, B, C)` of the position and velocity model, state
    /// `[v1, p1, v2, p2]`.
    pub fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let t = self.sample_time;
        (
            dmatrix![
                1.0, 0.0, 0.0, 0.0;
                t, 1.0, 0.0, 0.0;
                0.0, 0.0, 1.0, 0.0;
                0.0, 0.0, t, 1.0
            ],
            dmatrix![t, 0.0; 0.0, 0.0; 0.0, t; 0.0, 0.0],
            dmatrix![0.0, 1.0, 0.0, 0.0; 0.0, 0.0, 0.0, 1.0],
        )
    }

    pub fn boundary(&self) -> BoundaryCond {
        let pin = DMatrix::identity(4, 4) * TINY_VARIANCE;
        BoundaryCond::free_end(dvector![0.0, self.start[0], 0.0, self.start[1]], pin.clone())
            .with_terminal(dvector![0.0, self.end[0], 0.0, self.end[1]], pin)
    }
}

/// Continuous-time stage: `x' = J x + B0 u`, outputs the position followed
/// by one distance-like value per obstacle.
pub struct ObstacleStage<'a> {
    cfg: &'a ObstacleConfig,
}

impl NonlinearStage for ObstacleStage<'_> {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        2 + self.cfg.obstacles.len()
    }

    fn dynamics(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        dvector![u[0], x[0], u[1], x[2]]
    }

    fn output(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        let y = [x[1], x[3]];
        let mut out = vec![y[0], y[1]];
        out.extend(self.cfg.obstacles.iter().map(|o| o.value(&y)));
        DVector::from_vec(out)
    }

    fn dynamics_jacobian(&self, _k: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b, _) = self.cfg.matrices();
        let t = self.cfg.sample_time;
        ((a - DMatrix::identity(4, 4)) / t, b / t)
    }

    fn output_jacobian(&self, _k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let y = [x[1], x[3]];
        let mut c = DMatrix::zeros(self.output_dim(), 4);
        c[(0, 1)] = 1.0;
        c[(1, 3)] = 1.0;
        for (i, o) in self.cfg.obstacles.iter().enumerate() {
            let g = o.gradient(&y);
            c[(2 + i, 1)] = g[0];
            c[(2 + i, 3)] = g[1];
        }
        c
    }
}

impl ObstacleConfig {
    pub fn stage(&self) -> ObstacleStage<'_> {
        ObstacleStage { cfg: self }
    }
}

impl Relinearize for ObstacleConfig {
    fn linearize(&self, traj: &Trajectory) -> Result<Problem> {
        let bc = self.boundary();
        let model = linearize_trajectory(&self.stage(), &bc.x0_mean, &traj.x, &traj.u, self.sample_time)?;
        let mut atts = Vec::new();
        for k in 0..self.horizon {
            for l in 0..2 {
                atts.push(PriorAttachment::fixed(Target::Input { k, l }, 0.0, self.input_variance));
            }
            for (i, o) in self.obstacles.iter().enumerate() {
                atts.push(PriorAttachment::nuv(
                    Target::Output { k, h: 2 + i },
                    NuvSpec::half_space_lower(o.threshold(), self.gamma),
                ));
            }
        }
        Ok(Problem { model, bc, attachments: atts })
    }

    fn trajectory_from(&self, _problem: &Problem, res: &IakeResult) -> Trajectory {
        Trajectory { x: res.x_hat.clone(), u: res.u_hat.clone() }
    }
}

/// Straight line from start to end with a sinusoidal lateral bump, as a
/// consistent state and input trajectory that starts and ends at rest.
pub fn initial_trajectory(cfg: &ObstacleConfig) -> Trajectory {
    let kk = cfg.horizon;
    let t = cfg.sample_time;
    let (s, e) = (cfg.start, cfg.end);
    let (dx, dy) = (e[0] - s[0], e[1] - s[1]);
    let len = dx.hypot(dy).max(f64::MIN_POSITIVE);
    let normal = [-dy / len, dx / len];
    // state j = 0..=K has position q[j]; q[0] = q[1] = start because the
    // velocity at j = 0 is pinned to zero
    let q: Vec<[f64; 2]> = (0..=kk)
        .map(|j| {
            let f = j.saturating_sub(1) as f64 / (kk - 1) as f64;
            let bump = cfg.initial_bump * (PI * f).sin();
            [s[0] + f * dx + bump * normal[0], s[1] + f * dy + bump * normal[1]]
        })
        .collect();
    let vel = |j: usize| -> [f64; 2] {
        if j == 0 || j == kk {
            [0.0, 0.0]
        } else {
            [(q[j + 1][0] - q[j][0]) / t, (q[j + 1][1] - q[j][1]) / t]
        }
    };
    let mut x = Vec::with_capacity(kk);
    let mut u = Vec::with_capacity(kk);
    for j in 1..=kk {
        let (v, vp) = (vel(j), vel(j - 1));
        u.push(dvector![(v[0] - vp[0]) / t, (v[1] - vp[1]) / t]);
        x.push(dvector![v[0], q[j][0], v[1], q[j][1]]);
    }
    Trajectory { x, u }
}

pub fn initial_problem(cfg: &ObstacleConfig) -> Result<Problem> {
    cfg.validate()?;
    cfg.linearize(&initial_trajectory(cfg))
}

/// Minimum-energy solution without obstacles.
pub fn unconstrained_solution(cfg: &ObstacleConfig) -> Result<IakeResult> {
    let free = ObstacleConfig { obstacles: Vec::new(), ..cfg.clone() };
    free.validate()?;
    let p = free.linearize(&initial_trajectory(&free))?;
    iake_solve(&p, &free.iake)
}

pub fn run_obstacle(cfg: &ObstacleConfig, progress: &mut dyn FnMut(usize, usize, f64)) -> Result<ScenarioRun> {
    cfg.validate()?;
    let mut iake = cfg.iake;
    iake.relinearize = true;
    let r = relinearized_solve(cfg, initial_trajectory(cfg), &iake, progress)?;
    let res = &r.result;
    let kk = cfg.horizon;
    let pos: Vec<[f64; 2]> = res.x_hat.iter().map(|x| [x[1], x[3]]).collect();

    let mut run = ScenarioRun::from_result("obstacle", res, vec!["u1".into(), "u2".into()], vec!["y1".into(), "y2".into()]);
    run.y = res.y_hat.iter().map(|y| y.rows(0, 2).into_owned()).collect();
    run.converged = r.converged && res.converged;
    run.metrics.insert("outer_iterations".into(), r.outer_iterations as f64);
    let margin = cfg
        .obstacles
        .iter()
        .flat_map(|o| pos.iter().map(move |p| o.value(p) - o.threshold()))
        .fold(f64::INFINITY, f64::min);
    if !cfg.obstacles.is_empty() {
        run.metrics.insert("min_clearance".into(), margin);
    }
    let (a, b, _) = cfg.matrices();
    let bc = cfg.boundary();
    let start_err = (&res.x_hat[0] - (&a * &bc.x0_mean + &b * &res.u_hat[0])).amax();
    let end_err = (&res.x_hat[kk - 1] - &bc.terminal.as_ref().expect("pinned end").mean).amax();
    run.metrics.insert("start_error".into(), start_err);
    run.metrics.insert("end_error".into(), end_err);

    let mut path = vec![(cfg.start[0], cfg.start[1])];
    path.extend(pos.iter().map(|p| (p[0], p[1])));
    run.path = Some(path);
    run.shapes = cfg.obstacles.iter().map(|o| o.outline(96)).collect();
    Ok(run)
}
