//! Flappy bird: a falling point mass with binary upward kicks must pass
//! through a sequence of double slits.
//!
//! The state is `[height, vertical velocity]`. Each slit at step `k` is a
//! box `[a_k, b_k]` on the augmented output `y~_k = y_k + s_k`, where the
//! selector `s_k` is binarized over `{0, d_k}`, so that
//! `y_k ∈ [a_k, b_k]` or `y_k ∈ [a_k - d_k, b_k - d_k]`.

use nalgebra::{dmatrix, dvector, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iake::{iake_solve_with, IakeConfig};
use crate::lssm::{
    append_state_bc, augment_output_selector, selector_feasible_bands, BoundaryCond, Lssm, PriorAttachment,
    Problem, Target,
};
use crate::priors::NuvSpec;

use super::{Band, ScenarioRun};

/// A double slit at step `k`: the upper opening is `[lower, upper]`, the
/// other one lies `separation` below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slit {
    pub k: usize,
    pub lower: f64,
    pub upper: f64,
    pub separation: f64,
}

impl Slit {
    pub fn openings(&self) -> [(f64, f64); 2] {
        selector_feasible_bands(self.lower, self.upper, self.separation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlappyConfig {
    pub horizon: usize,
    pub mass: f64,
    pub sample_time: f64,
    pub gravity: f64,
    /// Slope parameter of the slit box priors.
    pub gamma: f64,
    pub initial_height: f64,
    pub slits: Vec<Slit>,
    pub iake: IakeConfig,
}

/// Iteration budget of the scenario; the binarizing updates approach the
/// levels only sublinearly, so 500 iterations are not enough here.
pub const DEFAULT_MAX_ITERS: usize = 20_000;

impl Default for FlappyConfig {
    fn default() -> Self {
        let slit = |k, lower, upper| Slit { k, lower, upper, separation: 3.0 };
        FlappyConfig {
            horizon: 300,
            mass: 1.0,
            sample_time: 0.1,
            gravity: 0.2,
            gamma: 100.0,
            initial_height: 0.0,
            slits: vec![slit(100, 1.0, 2.0), slit(200, 0.0, 1.0), slit(299, 1.0, 2.0)],
            iake: IakeConfig { max_iters: DEFAULT_MAX_ITERS, ..Default::default() },
        }
    }
}

impl FlappyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::contract("flappy horizon must be positive"));
        }
        if !(self.mass > 0.0 && self.sample_time > 0.0 && self.gamma > 0.0) {
            return Err(Error::contract("flappy mass, sample time and gamma must be positive"));
        }
        for s in &self.slits {
            if s.k >= self.horizon {
                return Err(Error::contract(format!("slit index {} beyond horizon {}", s.k, self.horizon)));
            }
            if !(s.lower <= s.upper) || !s.separation.is_finite() || s.separation == 0.0 {
                return Err(Error::contract(format!("malformed slit at step {}", s.k)));
            }
        }
        let mut ks: Vec<usize> = self.slits.iter().map(|s| s.k).collect();
        ks.sort_unstable();
        if ks.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("two slits at the same step"));
        }
        Ok(())
    }
}

/// Plant without selectors: `x_k = A x_{k-1} + B u_k + [0, -T g]`.
pub fn flappy_model(cfg: &FlappyConfig) -> Result<Lssm> {
    let t = cfg.sample_time;
    let mut m = Lssm::constant(
        cfg.horizon,
        dmatrix![1.0, t; 0.0, 1.0],
        dmatrix![0.0; 1.0 / cfg.mass],
        dmatrix![1.0, 0.0],
    )?;
    for so in &mut m.state_offset {
        *so = dvector![0.0, -t * cfg.gravity];
    }
    Ok(m)
}

pub fn build_flappy(cfg: &FlappyConfig) -> Result<Problem> {
    cfg.validate()?;
    let base = flappy_model(cfg)?;
    let slits: Vec<(usize, f64)> = cfg.slits.iter().map(|s| (s.k, s.separation)).collect();
    let (model, mut atts) = augment_output_selector(&base, 0, &slits)?;
    let bc = append_state_bc(&BoundaryCond::pinned_start(dvector![cfg.initial_height, 0.0]), 0.0, 1.0);
    for k in 0..cfg.horizon {
        atts.push(PriorAttachment::nuv(Target::Input { k, l: 0 }, NuvSpec::binarizing_em(0.0, 1.0)));
    }
    for s in &cfg.slits {
        atts.push(PriorAttachment::nuv(Target::Output { k: s.k, h: 1 }, NuvSpec::box_prior(s.lower, s.upper, cfg.gamma)));
    }
    Ok(Problem { model, bc, attachments: atts })
}

/// Height trajectory of the plant for a given input sequence.
pub fn flappy_response(cfg: &FlappyConfig, u: &[f64]) -> Result<Vec<f64>> {
    let m = flappy_model(cfg)?;
    let us: Vec<DVector<f64>> = u.iter().map(|&v| DVector::from_element(1, v)).collect();
    let (_, y) = m.simulate(&dvector![cfg.initial_height, 0.0], &us);
    Ok(y.iter().map(|v| v[0]).collect())
}

/// Number of openings of `slit` that contain `y` within `tol`.
pub fn openings_containing(slit: &Slit, y: f64, tol: f64) -> usize {
    slit.openings().iter().filter(|(lo, hi)| y >= lo - tol && y <= hi + tol).count()
}

/// Tolerance for slit membership.
pub const SLIT_TOL: f64 = 1e-6;

pub fn run_flappy(cfg: &FlappyConfig, progress: &mut dyn FnMut(usize, f64)) -> Result<ScenarioRun> {
    let p = build_flappy(cfg)?;
    let r = iake_solve_with(&p, &cfg.iake, None, progress)?;
    let u: Vec<f64> = r.u_hat.iter().map(|v| v[0]).collect();
    let y: Vec<f64> = r.y_hat.iter().map(|v| v[0]).collect();
    let mut run = ScenarioRun::from_result("flappy", &r, vec!["u".into(), "s".into()], vec!["y".into(), "y_aug".into()]);

    let level_dist = u.iter().map(|&v| v.abs().min((v - 1.0).abs())).fold(0.0, f64::max);
    let bad_slits = cfg.slits.iter().filter(|s| openings_containing(s, y[s.k], SLIT_TOL) != 1).count();
    let slit_violation = cfg
        .slits
        .iter()
        .map(|s| {
            s.openings()
                .iter()
                .map(|(lo, hi)| (lo - y[s.k]).max(y[s.k] - hi).max(0.0))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    let rounded: Vec<f64> = u.iter().map(|v| v.round().clamp(0.0, 1.0)).collect();
    let y_rounded = flappy_response(cfg, &rounded)?;
    let rounded_bad = cfg.slits.iter().filter(|s| openings_containing(s, y_rounded[s.k], SLIT_TOL) != 1).count();
    run.metrics.insert("max_distance_to_level".into(), level_dist);
    run.metrics.insert("slits_not_passed".into(), bad_slits as f64);
    run.metrics.insert("slit_violation".into(), slit_violation);
    run.metrics.insert("slits_not_passed_rounded".into(), rounded_bad as f64);
    run.metrics.insert("flaps".into(), rounded.iter().sum());

    // obstacles drawn as bars above, between and below the openings
    let ys = y.iter().copied().fold(0.0f64, |a, v| a.max(v.abs())) + 1.0;
    for s in &cfg.slits {
        let [(a, b), (c, d)] = s.openings();
        let (lo_open, hi_open) = if a < c { ((a, b), (c, d)) } else { ((c, d), (a, b)) };
        let x = s.k as f64;
        let bar = |y0: f64, y1: f64| vec![(x - 0.5, y0), (x + 0.5, y0), (x + 0.5, y1), (x - 0.5, y1), (x - 0.5, y0)];
        run.shapes.push(bar(-ys - (hi_open.1 - lo_open.0).abs(), lo_open.0));
        run.shapes.push(bar(lo_open.1, hi_open.0));
        run.shapes.push(bar(hi_open.1, ys + (hi_open.1 - lo_open.0).abs()));
    }
    run.path = Some(y.iter().enumerate().map(|(k, &v)| (k as f64, v)).collect());
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..cfg.horizon)
        .map(|k| match cfg.slits.iter().find(|s| s.k == k) {
            Some(s) => (s.lower, s.upper),
            None => (f64::NAN, f64::NAN),
        })
        .unzip();
    run.bands.push(Band { output: 1, lower: lo, upper: hi, label: "slit box".into() });
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iake::iake_solve;

    #[test]
    fn published_parameters() {
        let c = FlappyConfig::default();
        assert_eq!((c.horizon, c.mass, c.sample_time, c.gravity, c.gamma), (300, 1.0, 0.1, 0.2, 100.0));
        assert_eq!(c.slits.len(), 3);
        let p = build_flappy(&c).unwrap();
        // one selector per slit is binarized, the others are pinned to zero
        let selectors = p
            .attachments
            .iter()
            .filter(|a| matches!(a.target, Target::Input { l: 1, .. }))
            .filter(|a| matches!(a.prior, crate::lssm::PriorKind::Nuv { .. }))
            .count();
        assert_eq!(selectors, 3);
    }

    #[test]
    fn free_fall_parabola() {
        let c = FlappyConfig { slits: vec![], ..Default::default() };
        let y = flappy_response(&c, &vec![0.0; c.horizon]).unwrap();
        for (k, &yk) in y.iter().enumerate() {
            // y_k = -T^2 g k (k + 1) / 2 with zero-based steps
            let kk = (k + 1) as f64;
            let expect = -c.sample_time * c.sample_time * c.gravity * kk * (kk - 1.0) / 2.0;
            assert!((yk - expect).abs() < 1e-12, "k={k}: {yk} vs {expect}");
        }
    }

    #[test]
    fn slit_beyond_horizon_rejected() {
        let c = FlappyConfig { slits: vec![Slit { k: 300, lower: 0.0, upper: 1.0, separation: 2.0 }], ..Default::default() };
        assert!(build_flappy(&c).is_err());
    }

    #[test]
    fn toy_slit_solution_is_brute_force_feasible() {
        // the upper opening is out of reach within six steps; free fall
        // (-0.042 at step 6) and a single late kick both pass the lower one
        let c = FlappyConfig {
            horizon: 10,
            slits: vec![Slit { k: 6, lower: 4.9, upper: 5.1, separation: 5.0 }],
            iake: IakeConfig { max_iters: 5000, ..Default::default() },
            ..Default::default()
        };
        let feasible: Vec<Vec<f64>> = (0..64u32)
            .map(|bits| (0..10).map(|k| if k < 6 && bits >> k & 1 == 1 { 1.0 } else { 0.0 }).collect::<Vec<f64>>())
            .filter(|u| openings_containing(&c.slits[0], flappy_response(&c, u).unwrap()[6], SLIT_TOL) == 1)
            .collect();
        assert!(feasible.iter().any(|u| u.iter().all(|&v| v == 0.0)));

        let r = iake_solve(&build_flappy(&c).unwrap(), &c.iake).unwrap();
        // u_k reaches the height only from step k + 1, so later inputs carry no likelihood
        let u: Vec<f64> = (0..10).map(|k| if k < 6 { r.u_hat[k][0] } else { 0.0 }).collect();
        for v in &u {
            assert!(v.abs().min((v - 1.0).abs()) < 1e-3, "{u:?}");
        }
        let rounded: Vec<f64> = u.iter().map(|v| v.round()).collect();
        assert!(feasible.contains(&rounded), "{rounded:?}");
        assert_eq!(openings_containing(&c.slits[0], r.y_hat[6][0], SLIT_TOL), 1);
    }
}
