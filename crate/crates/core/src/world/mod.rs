//! Discrete-time kinematics, signal logic and occlusion for the single
//! intersection scene.
//!
//! Everything here is a pure function over value types. The vehicle travels
//! along its path direction and the pedestrian crosses perpendicular to it;
//! both carry their arc-length distance to the shared conflict point next to
//! their planar position.

mod geometry;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{line_of_sight, Obstacle, Vec2};

/// Exact international mile-per-hour to meter-per-second factor.
pub const MPH_TO_MPS: f64 = 0.44704;
/// Exact international foot to meter factor.
pub const FT_TO_M: f64 = 0.3048;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VehicleKind {
    /// Human-driven, no connectivity.
    Hdv,
    /// Automated, AEB-equipped.
    Av,
    /// Connected, receives V2P warnings.
    Cv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: String,
    pub kind: VehicleKind,
    pub position: Vec2,
    /// Unit direction of travel.
    pub direction: Vec2,
    pub speed: f64,
    /// Acceleration applied over the last step; negative when braking.
    pub accel_cmd: f64,
    /// Arc length to the conflict point; negative once passed.
    pub distance_to_conflict: f64,
    pub warning_received_at: Option<f64>,
    pub aeb_activated_at: Option<f64>,
    pub braking_started_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CrossingPhase {
    Waiting,
    Crossing,
    StoppedByWarning,
    Crossed,
}

impl CrossingPhase {
    /// Whether `self → next` is an allowed transition (self-loops included).
    pub fn can_become(self, next: CrossingPhase) -> bool {
        use CrossingPhase::*;
        self == next
            || matches!(
                (self, next),
                (Waiting, Crossing) | (Crossing, StoppedByWarning) | (Crossing, Crossed)
            )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, CrossingPhase::StoppedByWarning | CrossingPhase::Crossed)
    }

    /// Phases in which the pedestrian must be standing still.
    pub fn is_stationary(self) -> bool {
        !matches!(self, CrossingPhase::Crossing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub id: String,
    pub position: Vec2,
    pub direction: Vec2,
    pub speed: f64,
    pub distance_to_conflict: f64,
    pub phase: CrossingPhase,
    pub warning_received_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PedestrianLight {
    DontWalk,
    Walk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalState {
    pub pedestrian_light: PedestrianLight,
    pub changed_at: Option<f64>,
}

impl Default for SignalState {
    fn default() -> Self {
        SignalState {
            pedestrian_light: PedestrianLight::DontWalk,
            changed_at: None,
        }
    }
}

fn check_step(dt: f64) -> Result<(), KinematicsError> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(KinematicsError::InvalidStep(dt))
    }
}

/// Advances the vehicle one step with semi-implicit Euler.
///
/// The new speed `max(0, v + a·dt)` is used to advance the position, so a
/// vehicle braked to rest stays put until a positive command arrives.
pub fn step_vehicle(
    state: &VehicleState,
    accel_cmd: f64,
    dt: f64,
) -> Result<VehicleState, KinematicsError> {
    check_step(dt)?;
    if !accel_cmd.is_finite() {
        return Err(KinematicsError::NonFinite("acceleration command"));
    }
    if !state.speed.is_finite() || !state.position.is_finite() {
        return Err(KinematicsError::NonFinite("vehicle state"));
    }
    let speed = (state.speed + accel_cmd * dt).max(0.0);
    let travel = speed * dt;
    Ok(VehicleState {
        position: state.position + state.direction * travel,
        speed,
        accel_cmd,
        distance_to_conflict: state.distance_to_conflict - travel,
        ..state.clone()
    })
}

/// Moves the pedestrian at `speed` for one step in its current phase.
pub fn step_pedestrian(
    state: &PedestrianState,
    phase: CrossingPhase,
    speed: f64,
    dt: f64,
) -> Result<PedestrianState, KinematicsError> {
    check_step(dt)?;
    if !speed.is_finite() || !state.position.is_finite() {
        return Err(KinematicsError::NonFinite("pedestrian speed"));
    }
    let speed = if phase.is_stationary() { 0.0 } else { speed.max(0.0) };
    let travel = speed * dt;
    Ok(PedestrianState {
        position: state.position + state.direction * travel,
        speed,
        distance_to_conflict: state.distance_to_conflict - travel,
        phase,
        ..state.clone()
    })
}

/// Estimated arrival time `d / v` at the conflict point, or `None` for a
/// stopped entity or one already at or past the point.
pub fn eta_to_conflict(distance: f64, speed: f64) -> Option<f64> {
    (distance > 0.0 && speed > 0.0).then(|| distance / speed)
}

/// Flips the pedestrian light to Walk at the first call where the vehicle's
/// arrival time is known and at most `threshold`. Walk is absorbing.
pub fn update_signal(
    signal: SignalState,
    vehicle_eta: Option<f64>,
    threshold: f64,
    now: f64,
) -> SignalState {
    match (signal.pedestrian_light, vehicle_eta) {
        (PedestrianLight::DontWalk, Some(eta)) if eta <= threshold => SignalState {
            pedestrian_light: PedestrianLight::Walk,
            changed_at: Some(now),
        },
        _ => signal,
    }
}
