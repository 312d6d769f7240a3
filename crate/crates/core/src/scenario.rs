//! Scenario files: scene geometry, speeds, thresholds and agent parameters.
//!
//! Speeds may be written either as a plain number (m/s) or as `{"mph": 25}`;
//! the latter is converted with the exact factor at load time so everything
//! downstream is SI.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::agents::{DriverConfig, PedestrianConfig};
use crate::world::{
    CrossingPhase, Obstacle, PedestrianState, Vec2, VehicleKind, VehicleState, MPH_TO_MPS,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    #[serde(rename = "HDV_PED")]
    HdvPed,
    #[serde(rename = "AV_PED")]
    AvPed,
    #[serde(rename = "CV_PED")]
    CvPed,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::HdvPed, Experiment::AvPed, Experiment::CvPed];

    pub fn vehicle_kind(self) -> VehicleKind {
        match self {
            Experiment::HdvPed => VehicleKind::Hdv,
            Experiment::AvPed => VehicleKind::Av,
            Experiment::CvPed => VehicleKind::Cv,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Experiment::HdvPed => "hdv",
            Experiment::AvPed => "av",
            Experiment::CvPed => "cv",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::HdvPed => "HDV_PED",
            Experiment::AvPed => "AV_PED",
            Experiment::CvPed => "CV_PED",
        })
    }
}

impl FromStr for Experiment {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hdv" | "hdv_ped" => Ok(Experiment::HdvPed),
            "av" | "av_ped" => Ok(Experiment::AvPed),
            "cv" | "cv_ped" => Ok(Experiment::CvPed),
            other => Err(ScenarioError::Invalid(format!("unknown experiment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehiclePath {
    pub origin: Vec2,
    pub direction: Vec2,
    pub conflict_point: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossingPath {
    pub origin: Vec2,
    pub direction: Vec2,
    pub conflict_point: Vec2,
    /// World x-coordinate of the zebra line the vehicle stops short of.
    pub zebra_x: f64,
}

/// Vehicle body around its reference point (the front bumper), used only
/// for collision detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub half_width: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Footprint {
            length: 4.5,
            half_width: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentsConfig {
    #[serde(default = "DriverConfig::hdv")]
    pub hdv_driver: DriverConfig,
    #[serde(default = "DriverConfig::cv")]
    pub cv_driver: DriverConfig,
    #[serde(default)]
    pub pedestrian: PedestrianConfig,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        AgentsConfig {
            hdv_driver: DriverConfig::hdv(),
            cv_driver: DriverConfig::cv(),
            pedestrian: PedestrianConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub vehicle_path: VehiclePath,
    pub crossing_path: CrossingPath,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(deserialize_with = "speed_mps")]
    pub v_vehicle_initial: f64,
    #[serde(deserialize_with = "speed_mps")]
    pub v_pedestrian: f64,
    pub ttc_threshold: f64,
    pub signal_eta_trigger: f64,
    pub dt: f64,
    pub experiment: Experiment,
    #[serde(default)]
    pub agents: AgentsConfig,
    #[serde(default)]
    pub vehicle_footprint: Footprint,
    #[serde(default = "default_max_sim_time")]
    pub max_sim_time: f64,
    #[serde(default = "default_braking_onset")]
    pub braking_onset_threshold: f64,
}

fn default_max_sim_time() -> f64 {
    30.0
}

fn default_braking_onset() -> f64 {
    0.5
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpeedInput {
    MetersPerSecond(f64),
    Mph { mph: f64 },
}

fn speed_mps<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
    Ok(match SpeedInput::deserialize(de)? {
        SpeedInput::MetersPerSecond(v) => v,
        SpeedInput::Mph { mph } => mph * MPH_TO_MPS,
    })
}

impl Default for Scenario {
    /// Conflict point at the origin, vehicle 80 m upstream on +x, pedestrian
    /// 5 m from the conflict point on the −y curb, two 12 m × 2.5 m buses
    /// parked on the near shoulder upstream of the zebra.
    fn default() -> Self {
        let bus = |cx| Obstacle::new(Vec2::new(cx, -3.0), Vec2::new(6.0, 1.25));
        Scenario {
            vehicle_path: VehiclePath {
                origin: Vec2::new(-80.0, 0.0),
                direction: Vec2::new(1.0, 0.0),
                conflict_point: Vec2::ZERO,
            },
            crossing_path: CrossingPath {
                origin: Vec2::new(0.0, -5.0),
                direction: Vec2::new(0.0, 1.0),
                conflict_point: Vec2::ZERO,
                zebra_x: 0.0,
            },
            obstacles: vec![bus(-8.0), bus(-22.0)],
            v_vehicle_initial: 25.0 * MPH_TO_MPS,
            v_pedestrian: 1.0,
            ttc_threshold: 1.5,
            signal_eta_trigger: 5.0,
            dt: 0.02,
            experiment: Experiment::CvPed,
            agents: AgentsConfig::default(),
            vehicle_footprint: Footprint::default(),
            max_sim_time: default_max_sim_time(),
            braking_onset_threshold: default_braking_onset(),
        }
    }
}

// Perpendicular offset tolerated between a path line and its conflict point.
const ON_PATH_TOL: f64 = 1e-6;

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let mut scenario: Scenario = serde_json::from_str(text)?;
        scenario.normalize()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn with_experiment(mut self, experiment: Experiment) -> Self {
        self.experiment = experiment;
        self
    }

    /// Normalizes path directions and checks every invariant.
    pub fn normalize(&mut self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::Invalid(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        for (name, v) in [
            ("v_vehicle_initial", self.v_vehicle_initial),
            ("v_pedestrian", self.v_pedestrian),
            ("ttc_threshold", self.ttc_threshold),
            ("signal_eta_trigger", self.signal_eta_trigger),
            ("max_sim_time", self.max_sim_time),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.braking_onset_threshold >= 0.0) {
            return bad("braking_onset_threshold must be >= 0".into());
        }
        self.vehicle_path.direction = match self.vehicle_path.direction.normalized() {
            Some(d) => d,
            None => return bad("vehicle_path.direction must be non-zero".into()),
        };
        self.crossing_path.direction = match self.crossing_path.direction.normalized() {
            Some(d) => d,
            None => return bad("crossing_path.direction must be non-zero".into()),
        };
        if self.vehicle_path.direction.x.abs() < 1e-9 {
            return bad("vehicle path must cross the zebra line x = zebra_x".into());
        }
        let on_line = |origin: Vec2, dir: Vec2, p: Vec2| (p - origin).cross(dir).abs() <= ON_PATH_TOL;
        let vp = self.vehicle_path;
        let cp = self.crossing_path;
        if !on_line(vp.origin, vp.direction, vp.conflict_point) {
            return bad("conflict point is off the vehicle path".into());
        }
        if !on_line(cp.origin, cp.direction, cp.conflict_point) {
            return bad("conflict point is off the crossing path".into());
        }
        if (vp.conflict_point - cp.conflict_point).length() > ON_PATH_TOL {
            return bad("vehicle and crossing paths disagree on the conflict point".into());
        }
        if (vp.conflict_point - vp.origin).dot(vp.direction) <= 0.0 {
            return bad("vehicle must start upstream of the conflict point".into());
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            if !(ob.half_extents.x > 0.0 && ob.half_extents.y > 0.0) || !ob.center.is_finite() {
                return bad(format!("obstacle {i} must have positive half extents"));
            }
        }
        if !(self.vehicle_footprint.length > 0.0 && self.vehicle_footprint.half_width > 0.0) {
            return bad("vehicle_footprint must be positive".into());
        }
        self.agents
            .hdv_driver
            .validate()
            .and_then(|_| self.agents.cv_driver.validate())
            .and_then(|_| self.agents.pedestrian.validate())
            .map_err(ScenarioError::Invalid)
    }

    pub fn initial_vehicle(&self) -> VehicleState {
        let p = &self.vehicle_path;
        VehicleState {
            id: "vehicle-0".into(),
            kind: self.experiment.vehicle_kind(),
            position: p.origin,
            direction: p.direction,
            speed: self.v_vehicle_initial,
            accel_cmd: 0.0,
            distance_to_conflict: (p.conflict_point - p.origin).dot(p.direction),
            warning_received_at: None,
            aeb_activated_at: None,
            braking_started_at: None,
        }
    }

    pub fn initial_pedestrian(&self) -> PedestrianState {
        let p = &self.crossing_path;
        PedestrianState {
            id: "pedestrian-0".into(),
            position: p.origin,
            direction: p.direction,
            speed: 0.0,
            distance_to_conflict: (p.conflict_point - p.origin).dot(p.direction),
            phase: CrossingPhase::Waiting,
            warning_received_at: None,
        }
    }

    /// Signed distance along the vehicle path from `position` to the zebra line.
    pub fn distance_to_zebra(&self, position: Vec2) -> f64 {
        let dir = self.vehicle_path.direction;
        (self.crossing_path.zebra_x - position.x) / dir.x
    }

    /// Whether the pedestrian stands inside the vehicle body.
    pub fn collides(&self, vehicle: &VehicleState, pedestrian_at: Vec2) -> bool {
        let rel = pedestrian_at - vehicle.position;
        let along = rel.dot(vehicle.direction);
        let lateral = rel.cross(vehicle.direction).abs();
        along <= 0.0
            && along >= -self.vehicle_footprint.length
            && lateral <= self.vehicle_footprint.half_width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let s = Scenario::default();
        let back = Scenario::from_json(&s.to_json_pretty()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn mph_converts_exactly() {
        let mut v = serde_json::to_value(Scenario::default()).unwrap();
        v["v_vehicle_initial"] = serde_json::json!({"mph": 25});
        let s = Scenario::from_json(&v.to_string()).unwrap();
        assert_eq!(s.v_vehicle_initial, 11.176);
    }

    #[test]
    fn initial_distances() {
        let s = Scenario::default();
        assert_eq!(s.initial_vehicle().distance_to_conflict, 80.0);
        assert_eq!(s.initial_pedestrian().distance_to_conflict, 5.0);
        assert_eq!(s.distance_to_zebra(Vec2::new(-12.5, 0.0)), 12.5);
    }

    #[test]
    fn rejects_invalid_fields() {
        let cases: Vec<(&str, serde_json::Value)> = vec![
            ("dt", 0.0.into()),
            ("v_pedestrian", (-1.0).into()),
            ("ttc_threshold", 0.0.into()),
        ];
        for (field, value) in cases {
            let mut v = serde_json::to_value(Scenario::default()).unwrap();
            v[field] = value;
            assert!(
                matches!(Scenario::from_json(&v.to_string()), Err(ScenarioError::Invalid(_))),
                "{field}"
            );
        }
        let mut v = serde_json::to_value(Scenario::default()).unwrap();
        v["crossing_path"]["conflict_point"] = serde_json::json!({"x": 0.0, "y": 1.0});
        v["vehicle_path"]["conflict_point"] = serde_json::json!({"x": 0.0, "y": 1.0});
        assert!(Scenario::from_json(&v.to_string()).is_err());
        assert!(matches!(
            Scenario::from_json("{"),
            Err(ScenarioError::Json(_))
        ));
    }

    #[test]
    fn experiment_names() {
        assert_eq!("hdv".parse::<Experiment>().unwrap(), Experiment::HdvPed);
        assert_eq!("CV_PED".parse::<Experiment>().unwrap(), Experiment::CvPed);
        assert!("bike".parse::<Experiment>().is_err());
        assert_eq!(
            serde_json::to_string(&Experiment::AvPed).unwrap(),
            "\"AV_PED\""
        );
    }

    #[test]
    fn collision_footprint() {
        let s = Scenario::default();
        let mut v = s.initial_vehicle();
        v.position = Vec2::new(1.0, 0.0);
        assert!(s.collides(&v, Vec2::new(0.0, 0.5)));
        assert!(!s.collides(&v, Vec2::new(0.0, 1.5)));
        assert!(!s.collides(&v, Vec2::new(1.5, 0.0)));
        assert!(!s.collides(&v, Vec2::new(-4.0, 0.0)));
    }
}
