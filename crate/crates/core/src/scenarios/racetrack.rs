//! Minimal-time driving along a race track.
//!
//! The vehicle is a kinematic single-track (Ackermann) model written in
//! curvilinear coordinates with the arc length `s` along the centerline as
//! the independent variable. State `[z, theta, v, a, delta, t]` (lateral
//! offset, relative heading, speed, acceleration, steering angle, elapsed
//! time), input `[delta_rate, a_rate]`. Box priors keep `z`, `a`, `delta`
//! and the squared total acceleration within bounds, and a zero-mean
//! Gaussian on the final time rewards fast laps.

use std::f64::consts::PI;

use nalgebra::{dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iake::{relinearized_solve, IakeConfig, IakeResult, Relinearize, Trajectory};
use crate::lssm::{linearize_trajectory, BoundaryCond, NonlinearStage, PriorAttachment, Problem, Target};
use crate::priors::NuvSpec;

use super::{Band, ScenarioRun};

/// Prior variance of terminal state components that are left free.
const FREE_VARIANCE: f64 = 1e12;

/// Centerline description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Track {
    /// Closed track wrapped around two circles like a belt around two
    /// pulleys: a tight hairpin of radius `small_radius`, a wider one of
    /// radius `large_radius`, centers `center_distance` apart, joined by
    /// tangent straights. Driven counterclockwise from the middle of a
    /// straight.
    TwoHairpins { small_radius: f64, large_radius: f64, center_distance: f64 },
    /// Curvature sampled at equidistant points over `length`.
    Curvature { length: f64, curvature: Vec<f64> },
}

impl Track {
    /// `(segment length, curvature)` pieces, or `None` for sampled tracks.
    fn pieces(&self) -> Option<Vec<(f64, f64)>> {
        match *self {
            Track::TwoHairpins { small_radius: r1, large_radius: r2, center_distance: d } => {
                let alpha = ((r2 - r1) / d).asin();
                let ls = (d * d - (r2 - r1) * (r2 - r1)).sqrt();
                Some(vec![
                    (ls / 2.0, 0.0),
                    (r2 * (PI + 2.0 * alpha), 1.0 / r2),
                    (ls, 0.0),
                    (r1 * (PI - 2.0 * alpha), 1.0 / r1),
                    (ls / 2.0, 0.0),
                ])
            }
            Track::Curvature { .. } => None,
        }
    }

    pub fn length(&self) -> f64 {
        match self {
            Track::Curvature { length, .. } => *length,
            _ => self.pieces().expect("piecewise track").iter().map(|p| p.0).sum(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Track::TwoHairpins { small_radius: r1, large_radius: r2, center_distance: d } => {
                if !(*r1 > 0.0 && r2 >= r1 && *d > r2 - r1 && *d > 0.0) {
                    return Err(Error::contract("two-hairpin track needs 0 < r1 <= r2 and d > r2 - r1"));
                }
            }
            Track::Curvature { length, curvature } => {
                if !(*length > 0.0) || curvature.is_empty() || curvature.iter().any(|c| !c.is_finite()) {
                    return Err(Error::contract("sampled track needs a positive length and finite curvature"));
                }
            }
        }
        Ok(())
    }

    /// Curvature at arc length `s`.
    pub fn curvature_at(&self, s: f64) -> f64 {
        match self {
            Track::Curvature { length, curvature } => {
                let i = ((s / length) * curvature.len() as f64).floor() as isize;
                curvature[i.clamp(0, curvature.len() as isize - 1) as usize]
            }
            _ => {
                let mut acc = 0.0;
                let pieces = self.pieces().expect("piecewise track");
                for &(len, kappa) in &pieces {
                    acc += len;
                    if s < acc {
                        return kappa;
                    }
                }
                pieces.last().expect("nonempty").1
            }
        }
    }

    /// Curvature per spatial step, taken at the middle of each step.
    pub fn sample(&self, horizon: usize) -> Vec<f64> {
        let ts = self.length() / horizon as f64;
        (0..horizon).map(|k| self.curvature_at((k as f64 + 0.5) * ts)).collect()
    }
}

/// Centerline points and unit normals at `s_k = k T_s`, `k = 0..=K`, from
/// integrating the sampled curvature exactly along circular arcs.
pub fn centerline(kappa: &[f64], ts: f64) -> Vec<([f64; 2], [f64; 2])> {
    let mut p = [0.0, 0.0];
    let mut phi = 0.0f64;
    let mut out = Vec::with_capacity(kappa.len() + 1);
    out.push((p, [-phi.sin(), phi.cos()]));
    for &k in kappa {
        let dphi = k * ts;
        // chord of an arc of length ts
        let chord = if dphi.abs() < 1e-12 { ts } else { 2.0 * (dphi / 2.0).sin() / k };
        let mid = phi + dphi / 2.0;
        p = [p[0] + chord * mid.cos(), p[1] + chord * mid.sin()];
        phi += dphi;
        out.push((p, [-phi.sin(), phi.cos()]));
    }
    out
}

/// Box on one output with its slope parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBound {
    pub lower: f64,
    pub upper: f64,
    pub gamma: f64,
}

impl BoxBound {
    pub fn violation(&self, y: f64) -> f64 {
        (self.lower - y).max(y - self.upper).max(0.0)
    }

    pub fn span(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceTrackConfig {
    pub horizon: usize,
    pub track: Track,
    pub vehicle_length: f64,
    /// Weight of the lateral part of the squared total acceleration.
    pub psi: f64,
    pub lateral_offset: BoxBound,
    pub acceleration: BoxBound,
    pub steering: BoxBound,
    pub total_acceleration_sq: BoxBound,
    pub terminal_time_variance: f64,
    pub input_variance: f64,
    /// Speed of the constant-speed centerline initialization and of the
    /// pinned start.
    pub initial_speed: f64,
    pub iake: IakeConfig,
}

impl Default for RaceTrackConfig {
    fn default() -> Self {
        RaceTrackConfig {
            horizon: 1000,
            track: Track::TwoHairpins { small_radius: 0.012, large_radius: 0.03, center_distance: 0.1 },
            vehicle_length: 0.004,
            psi: 25.0,
            lateral_offset: BoxBound { lower: -0.006, upper: 0.006, gamma: 0.005 },
            acceleration: BoxBound { lower: -1.0, upper: 1.0, gamma: 0.001 },
            steering: BoxBound { lower: -0.35, upper: 0.35, gamma: 0.001 },
            total_acceleration_sq: BoxBound { lower: 0.0, upper: 150.0, gamma: 1e-8 },
            terminal_time_variance: 500.0,
            input_variance: 1e8,
            initial_speed: 0.2,
            iake: IakeConfig { max_iters: 20, relinearize: true, relin_max_outer: 1000, relin_tol: 5e-3, ..Default::default() },
        }
    }
}

impl RaceTrackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::contract("race track horizon must be at least 2"));
        }
        self.track.validate()?;
        if !(self.vehicle_length > 0.0 && self.psi >= 0.0 && self.initial_speed > 0.0) {
            return Err(Error::contract("vehicle length and initial speed must be positive, psi nonnegative"));
        }
        if !(self.terminal_time_variance > 0.0 && self.input_variance > 0.0) {
            return Err(Error::contract("prior variances must be positive"));
        }
        for b in [self.lateral_offset, self.acceleration, self.steering, self.total_acceleration_sq] {
            if !(b.lower <= b.upper && b.gamma > 0.0) {
                return Err(Error::contract(format!("malformed box {b:?}")));
            }
        }
        let kappa = self.track.sample(self.horizon);
        let kz = kappa.iter().map(|k| k.abs()).fold(0.0, f64::max) * self.lateral_offset.lower.abs().max(self.lateral_offset.upper.abs());
        if kz >= 1.0 {
            return Err(Error::Geometry("track curvature times admissible offset reaches 1".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.track.length() / self.horizon as f64
    }

    fn start_state(&self, kappa0: f64) -> DVector<f64> {
        let delta = (self.vehicle_length * kappa0).atan();
        dvector![0.0, 0.0, self.initial_speed, 0.0, delta, 0.0]
    }

    pub fn boundary(&self, kappa: &[f64]) -> BoundaryCond {
        let mut tcov = DMatrix::from_diagonal_element(6, 6, FREE_VARIANCE);
        tcov[(5, 5)] = self.terminal_time_variance;
        BoundaryCond::pinned_start(self.start_state(kappa[0])).with_terminal(DVector::zeros(6), tcov)
    }

    pub fn stage(&self) -> RaceStage {
        RaceStage { kappa: self.track.sample(self.horizon), length: self.vehicle_length, psi: self.psi }
    }

    /// Elapsed time of the constant-speed centerline initialization.
    pub fn initial_lap_time(&self) -> f64 {
        self.track.length() / self.initial_speed
    }
}

/// Spatial dynamics and outputs per sample.
#[derive(Debug, Clone)]
pub struct RaceStage {
    pub kappa: Vec<f64>,
    pub length: f64,
    pub psi: f64,
}

impl RaceStage {
    /// `(1 - kappa z) / (v cos theta)`, the time per unit arc length.
    fn slowness(&self, k: usize, x: &DVector<f64>) -> f64 {
        (1.0 - self.kappa[k] * x[0]) / (x[2] * x[1].cos())
    }
}

impl NonlinearStage for RaceStage {
    fn state_dim(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        4
    }

    fn dynamics(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (z, th, v, a, d) = (x[0], x[1], x[2], x[3], x[4]);
        let kap = self.kappa[k];
        let g = self.slowness(k, x);
        dvector![
            g * v * th.sin(),
            g * v * (d.tan() / self.length - kap * th.cos() / (1.0 - kap * z)),
            g * a,
            g * u[1],
            g * u[0],
            g
        ]
    }

    fn output(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
        let (v, a, d) = (x[2], x[3], x[4]);
        let lat = v * v * d.tan() / self.length;
        dvector![x[0], a, d, a * a + self.psi * lat * lat]
    }

    fn dynamics_jacobian(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (z, th, v, a, d) = (x[0], x[1], x[2], x[3], x[4]);
        let kap = self.kappa[k];
        let (s, c) = th.sin_cos();
        let q = 1.0 - kap * z;
        let g = q / (v * c);
        // partials of g
        let g_z = -kap / (v * c);
        let g_th = g * s / c;
        let g_v = -g / v;
        let tan_d = d.tan();
        let sec2 = 1.0 + tan_d * tan_d;

        let mut jx = DMatrix::zeros(6, 6);
        // z' = q tan(theta)
        jx[(0, 0)] = -kap * s / c;
        jx[(0, 1)] = q / (c * c);
        // theta' = q tan(delta) / (l cos theta) - kappa
        jx[(1, 0)] = -kap * tan_d / (self.length * c);
        jx[(1, 1)] = q * tan_d * s / (self.length * c * c);
        jx[(1, 4)] = q * sec2 / (self.length * c);
        // v' = g a, a' = g a_rate, delta' = g delta_rate, t' = g
        for (row, w) in [(2, a), (3, u[1]), (4, u[0]), (5, 1.0)] {
            jx[(row, 0)] = g_z * w;
            jx[(row, 1)] = g_th * w;
            jx[(row, 2)] = g_v * w;
        }
        jx[(2, 3)] = g;
        let mut ju = DMatrix::zeros(6, 2);
        ju[(4, 0)] = g;
        ju[(3, 1)] = g;
        (jx, ju)
    }

    fn output_jacobian(&self, _k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let (v, a, d) = (x[2], x[3], x[4]);
        let tan_d = d.tan();
        let lat = v * v * tan_d / self.length;
        let mut c = DMatrix::zeros(4, 6);
        c[(0, 0)] = 1.0;
        c[(1, 3)] = 1.0;
        c[(2, 4)] = 1.0;
        c[(3, 2)] = 2.0 * self.psi * lat * 2.0 * v * tan_d / self.length;
        c[(3, 3)] = 2.0 * a;
        c[(3, 4)] = 2.0 * self.psi * lat * v * v * (1.0 + tan_d * tan_d) / self.length;
        c
    }
}

/// Middle of the longest run of samples at the largest absolute curvature.
pub fn sharpest_sample(kappa: &[f64]) -> usize {
    let peak = kappa.iter().map(|k| k.abs()).fold(0.0, f64::max);
    let (mut best, mut best_len, mut start) = (0, 0, None);
    for k in 0..=kappa.len() {
        let on = k < kappa.len() && kappa[k].abs() == peak;
        match (on, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                if k - s > best_len {
                    best = (s + k - 1) / 2;
                    best_len = k - s;
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

/// Rejects trajectories on which the curvilinear coordinates break down.
fn check_trajectory(stage: &RaceStage, traj: &Trajectory) -> Result<()> {
    for (k, x) in traj.x.iter().enumerate() {
        if stage.kappa[k] * x[0] >= 1.0 {
            return Err(Error::Geometry(format!("kappa z >= 1 at sample {k}")));
        }
        if !(x[2] > 0.0 && x[1].cos() > 0.0) {
            return Err(Error::Linearization {
                stage: k,
                outer: 0,
                what: format!("speed {} or heading {} leaves the admissible range", x[2], x[1]),
            });
        }
    }
    Ok(())
}

struct RaceSystem<'a> {
    cfg: &'a RaceTrackConfig,
    stage: RaceStage,
}

impl Relinearize for RaceSystem<'_> {
    fn linearize(&self, traj: &Trajectory) -> Result<Problem> {
        check_trajectory(&self.stage, traj)?;
        let bc = self.cfg.boundary(&self.stage.kappa);
        let model = linearize_trajectory(&self.stage, &bc.x0_mean, &traj.x, &traj.u, self.cfg.step())?;
        let c = self.cfg;
        let mut atts = Vec::new();
        for k in 0..c.horizon {
            for l in 0..2 {
                atts.push(PriorAttachment::fixed(Target::Input { k, l }, 0.0, c.input_variance));
            }
            for (h, b) in [c.lateral_offset, c.acceleration, c.steering, c.total_acceleration_sq].into_iter().enumerate() {
                atts.push(PriorAttachment::nuv(Target::Output { k, h }, NuvSpec::box_prior(b.lower, b.upper, b.gamma)));
            }
        }
        Ok(Problem { model, bc, attachments: atts })
    }

    fn trajectory_from(&self, _problem: &Problem, res: &IakeResult) -> Trajectory {
        Trajectory { x: res.x_hat.clone(), u: res.u_hat.clone() }
    }
}

/// Centerline at constant speed with the steering angle matching the
/// curvature.
pub fn initial_trajectory(cfg: &RaceTrackConfig) -> Trajectory {
    let kappa = cfg.track.sample(cfg.horizon);
    let ts = cfg.step();
    let v = cfg.initial_speed;
    let mut prev_delta = cfg.start_state(kappa[0])[4];
    let mut x = Vec::with_capacity(cfg.horizon);
    let mut u = Vec::with_capacity(cfg.horizon);
    for k in 0..cfg.horizon {
        // the steering held during step k + 1 matches its curvature
        let delta = (cfg.vehicle_length * kappa[(k + 1).min(cfg.horizon - 1)]).atan();
        // delta' = delta_rate / v per unit arc length
        u.push(dvector![v * (delta - prev_delta) / ts, 0.0]);
        x.push(dvector![0.0, 0.0, v, 0.0, delta, (k + 1) as f64 * ts / v]);
        prev_delta = delta;
    }
    Trajectory { x, u }
}

pub fn initial_problem(cfg: &RaceTrackConfig) -> Result<Problem> {
    cfg.validate()?;
    RaceSystem { cfg, stage: cfg.stage() }.linearize(&initial_trajectory(cfg))
}

pub fn run_racetrack(cfg: &RaceTrackConfig, progress: &mut dyn FnMut(usize, usize, f64)) -> Result<ScenarioRun> {
    cfg.validate()?;
    let sys = RaceSystem { cfg, stage: cfg.stage() };
    let mut iake = cfg.iake;
    iake.relinearize = true;
    let r = relinearized_solve(&sys, initial_trajectory(cfg), &iake, progress)?;
    check_trajectory(&sys.stage, &r.trajectory)?;
    let res = &r.result;
    let kk = cfg.horizon;
    let xs = &res.x_hat;

    let mut run = ScenarioRun::from_result(
        "race_track",
        res,
        vec!["delta_rate".into(), "a_rate".into()],
        vec!["z".into(), "a".into(), "delta".into(), "a_tot_sq".into()],
    );
    // the inner loop runs a fixed budget per linearization
    run.converged = r.converged;
    // the outputs of the nonlinear model at the solution
    run.y = xs.iter().enumerate().map(|(k, x)| sys.stage.output(k, x)).collect();
    let boxes = [cfg.lateral_offset, cfg.acceleration, cfg.steering, cfg.total_acceleration_sq];
    for (h, (name, b)) in ["z", "a", "delta", "a_tot_sq"].iter().zip(boxes).enumerate() {
        let worst = run.y.iter().map(|y| b.violation(y[h])).fold(0.0, f64::max);
        run.metrics.insert(format!("violation_{name}"), worst);
        run.metrics.insert(format!("relative_violation_{name}"), worst / b.span());
        run.bands.push(Band { output: h, lower: vec![b.lower; kk], upper: vec![b.upper; kk], label: format!("{name} bounds") });
    }
    let kappa = &sys.stage.kappa;
    let sharpest = sharpest_sample(kappa);
    let mean_speed = xs.iter().map(|x| x[2]).sum::<f64>() / kk as f64;
    run.metrics.insert("outer_iterations".into(), r.outer_iterations as f64);
    run.metrics.insert("terminal_time".into(), xs[kk - 1][5]);
    run.metrics.insert("initial_time".into(), cfg.initial_lap_time());
    run.metrics.insert("sharpest_curvature_index".into(), sharpest as f64);
    run.metrics.insert("speed_at_sharpest_curvature".into(), xs[sharpest][2]);
    run.metrics.insert("mean_speed".into(), mean_speed);
    run.metrics.insert("max_kappa_z".into(), (0..kk).map(|k| kappa[k] * xs[k][0]).fold(f64::NEG_INFINITY, f64::max));

    let line = centerline(kappa, cfg.step());
    let edge = |w: f64| line.iter().map(|(p, n)| (p[0] + w * n[0], p[1] + w * n[1])).collect::<Vec<_>>();
    run.shapes = vec![edge(cfg.lateral_offset.lower), edge(cfg.lateral_offset.upper)];
    let mut path = vec![(line[0].0[0], line[0].0[1])];
    path.extend(xs.iter().zip(&line[1..]).map(|(x, (p, n))| (p[0] + x[0] * n[0], p[1] + x[0] * n[1])));
    run.path = Some(path);
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lssm::finite_difference_jacobian;

    #[test]
    fn published_parameters() {
        let c = RaceTrackConfig::default();
        assert_eq!(c.horizon, 1000);
        assert_eq!(c.psi, 25.0);
        assert_eq!(c.lateral_offset, BoxBound { lower: -0.006, upper: 0.006, gamma: 0.005 });
        assert_eq!(c.acceleration, BoxBound { lower: -1.0, upper: 1.0, gamma: 0.001 });
        assert_eq!(c.steering, BoxBound { lower: -0.35, upper: 0.35, gamma: 0.001 });
        assert_eq!(c.total_acceleration_sq, BoxBound { lower: 0.0, upper: 150.0, gamma: 1e-8 });
        assert_eq!(c.terminal_time_variance, 500.0);
        assert_eq!(c.input_variance, 1e8);
    }

    #[test]
    fn sharpest_sample_is_the_middle_of_the_tightest_arc() {
        assert_eq!(sharpest_sample(&[0.0, 1.0, 3.0, 3.0, 3.0, 0.0, -3.0, 1.0]), 3);
        assert_eq!(sharpest_sample(&[0.0, 0.0]), 0);
    }

    #[test]
    fn two_hairpin_track_closes() {
        let c = RaceTrackConfig::default();
        let kappa = c.track.sample(20_000);
        let line = centerline(&kappa, c.track.length() / 20_000.0);
        let (p0, n0) = line[0];
        let (p1, n1) = line[line.len() - 1];
        assert!((p0[0] - p1[0]).hypot(p0[1] - p1[1]) < 1e-3, "{p1:?}");
        assert!((n0[0] - n1[0]).hypot(n0[1] - n1[1]) < 1e-3);
        let turn: f64 = kappa.iter().sum::<f64>() * c.track.length() / 20_000.0;
        assert!((turn - 2.0 * PI).abs() < 1e-2);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let c = RaceTrackConfig::default();
        let mut s = c.stage();
        s.kappa[3] = 7.5;
        let x = dvector![0.002, 0.1, 0.4, 0.3, 0.05, 1.2];
        let u = dvector![0.2, -0.1];
        let (jx, ju) = s.dynamics_jacobian(3, &x, &u);
        let fdx = finite_difference_jacobian(|v| s.dynamics(3, v, &u), &x);
        let fdu = finite_difference_jacobian(|v| s.dynamics(3, &x, v), &u);
        assert!((&jx - &fdx).amax() < 1e-6, "{jx}\n{fdx}");
        assert!((&ju - &fdu).amax() < 1e-6);
        let fdc = finite_difference_jacobian(|v| s.output(3, v), &x);
        assert!((s.output_jacobian(3, &x) - fdc).amax() < 1e-5);
    }

    #[test]
    fn offset_reaching_curvature_radius_is_a_geometry_error() {
        let c = RaceTrackConfig {
            track: Track::Curvature { length: 1.0, curvature: vec![0.0, 200.0, 0.0] },
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Geometry(_))));
        let c = RaceTrackConfig::default();
        let mut t = initial_trajectory(&c);
        let sharp = c.stage().kappa.iter().cloned().fold(0.0, f64::max);
        let sys = RaceSystem { cfg: &c, stage: c.stage() };
        let k = sys.stage.kappa.iter().position(|&v| v == sharp).unwrap();
        t.x[k][0] = 1.0 / sharp;
        assert!(matches!(sys.linearize(&t), Err(Error::Geometry(_))));
    }

    #[test]
    fn straight_track_accelerates_on_the_centerline() {
        let c = RaceTrackConfig {
            horizon: 100,
            track: Track::Curvature { length: 0.2, curvature: vec![0.0] },
            ..Default::default()
        };
        let run = run_racetrack(&c, &mut |_, _, _| {}).unwrap();
        let zmax = run.x.iter().map(|x| x[0].abs()).fold(0.0, f64::max);
        assert!(zmax < 1e-6, "z drifts to {zmax}");
        assert!(run.metrics["terminal_time"] < c.initial_lap_time());
        // speed increases along the straight
        assert!(run.x[99][2] > run.x[0][2]);
    }
}
