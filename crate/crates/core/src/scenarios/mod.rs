//! Builders and runners for the application scenarios.

pub mod corridor;
pub mod dac;
pub mod flappy;
pub mod obstacle;
pub mod racetrack;

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::iake::{IakeConfig, IakeResult};
use crate::lssm::Problem;

pub use corridor::CorridorConfig;
pub use dac::DacConfig;
pub use flappy::FlappyConfig;
pub use obstacle::ObstacleConfig;
pub use racetrack::RaceTrackConfig;

/// Interval per step drawn over one output in plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub output: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub label: String,
}

/// Everything a scenario run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub name: String,
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub x: Vec<DVector<f64>>,
    pub u_labels: Vec<String>,
    pub y_labels: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    /// Constraint violations and other scalar diagnostics.
    pub metrics: BTreeMap<String, f64>,
    pub bands: Vec<Band>,
    /// Planar path for two-dimensional scenarios.
    pub path: Option<Vec<(f64, f64)>>,
    /// Obstacles or other planar shapes, as closed polylines.
    pub shapes: Vec<Vec<(f64, f64)>>,
}

impl ScenarioRun {
    pub fn from_result(name: &str, r: &IakeResult, u_labels: Vec<String>, y_labels: Vec<String>) -> Self {
        ScenarioRun {
            name: name.into(),
            u: r.u_hat.clone(),
            y: r.y_hat.clone(),
            x: r.x_hat.clone(),
            u_labels,
            y_labels,
            iterations: r.iterations,
            converged: r.converged,
            metrics: BTreeMap::new(),
            bands: Vec::new(),
            path: None,
            shapes: Vec::new(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioConfig {
    Dac(DacConfig),
    Corridor(CorridorConfig),
    Flappy(FlappyConfig),
    Obstacle(ObstacleConfig),
    RaceTrack(RaceTrackConfig),
}

/// Keys that select the variant of a tagged config object.
const TAG_KEYS: [&str; 3] = ["kind", "type", "shape"];

/// Overlays `user` onto `base`. Objects merge key by key unless `user`
/// selects a different variant; everything else is replaced.
fn overlay(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            let switches = TAG_KEYS.iter().any(|k| u.get(*k).is_some_and(|t| b.get(*k) != Some(t)));
            if switches {
                *b = u;
                return;
            }
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

impl ScenarioConfig {
    /// Built-in defaults of the scenario called `name`.
    pub fn defaults(name: &str) -> Option<Self> {
        Some(match name {
            "dac" => ScenarioConfig::Dac(DacConfig::default()),
            "corridor" => ScenarioConfig::Corridor(CorridorConfig::default()),
            "flappy" => ScenarioConfig::Flappy(FlappyConfig::default()),
            "obstacle" => ScenarioConfig::Obstacle(ObstacleConfig::default()),
            "race_track" => ScenarioConfig::RaceTrack(RaceTrackConfig::default()),
            _ => return None,
        })
    }

    /// Parses a config in which every omitted field, nested ones included,
    /// takes the scenario's default. A plain derive would fill a partial
    /// `iake` object from the generic IAKE defaults instead.
    pub fn from_json(text: &str) -> Result<Self> {
        // on failure the strict parse gives the better message, with a position
        let strict = serde_json::from_str::<ScenarioConfig>(text);
        let merged = (|| {
            let user: Value = serde_json::from_str(text).ok()?;
            let defaults = Self::defaults(user.get("kind")?.as_str()?)?;
            let mut merged = serde_json::to_value(defaults).ok()?;
            overlay(&mut merged, user);
            serde_json::from_value(merged).ok()
        })();
        match (merged, strict) {
            (Some(cfg), _) => Ok(cfg),
            (None, Err(e)) => Err(e.into()),
            (None, Ok(_)) => Err(Error::contract("config does not combine with the scenario defaults")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioConfig::Dac(_) => "dac",
            ScenarioConfig::Corridor(_) => "corridor",
            ScenarioConfig::Flappy(_) => "flappy",
            ScenarioConfig::Obstacle(_) => "obstacle",
            ScenarioConfig::RaceTrack(_) => "race_track",
        }
    }

    pub fn iake_mut(&mut self) -> &mut IakeConfig {
        match self {
            ScenarioConfig::Dac(c) => &mut c.iake,
            ScenarioConfig::Corridor(c) => &mut c.iake,
            ScenarioConfig::Flappy(c) => &mut c.iake,
            ScenarioConfig::Obstacle(c) => &mut c.iake,
            ScenarioConfig::RaceTrack(c) => &mut c.iake,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScenarioConfig::Dac(c) => c.target.sample(c.horizon).map(|_| ()),
            ScenarioConfig::Corridor(c) => c.validate(),
            ScenarioConfig::Flappy(c) => c.validate(),
            ScenarioConfig::Obstacle(c) => c.validate(),
            ScenarioConfig::RaceTrack(c) => c.validate(),
        }?;
        let mut cfg = self.clone();
        cfg.iake_mut().validate()
    }

    /// The (initial, for nonlinear scenarios) linear problem.
    pub fn problem(&self) -> Result<Problem> {
        match self {
            ScenarioConfig::Dac(c) => dac::build_dac(c),
            ScenarioConfig::Corridor(c) => corridor::build_corridor(c),
            ScenarioConfig::Flappy(c) => flappy::build_flappy(c),
            ScenarioConfig::Obstacle(c) => obstacle::initial_problem(c),
            ScenarioConfig::RaceTrack(c) => racetrack::initial_problem(c),
        }
    }

    /// Runs the scenario; `progress` receives `(outer, inner, delta)`.
    pub fn run(&self, progress: &mut dyn FnMut(usize, usize, f64)) -> Result<ScenarioRun> {
        match self {
            ScenarioConfig::Dac(c) => dac::run_dac(c, &mut |i, d| progress(1, i, d)),
            ScenarioConfig::Corridor(c) => corridor::run_corridor(c, &mut |i, d| progress(1, i, d)),
            ScenarioConfig::Flappy(c) => flappy::run_flappy(c, &mut |i, d| progress(1, i, d)),
            ScenarioConfig::Obstacle(c) => obstacle::run_obstacle(c, progress),
            ScenarioConfig::RaceTrack(c) => racetrack::run_racetrack(c, progress),
        }
    }
}
