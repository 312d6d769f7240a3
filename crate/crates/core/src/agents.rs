//! Scripted stand-ins for the human driver and the pedestrian.
//!
//! Human variability is reduced to a fixed perception-reaction delay and a
//! constant braking deceleration. Policies are pure; whatever they need to
//! remember between ticks is returned to the caller.

use serde::{Deserialize, Serialize};

use crate::world::{
    line_of_sight, CrossingPhase, Obstacle, PedestrianLight, PedestrianState, SignalState,
    VehicleState,
};

/// Upper bound on any commanded deceleration, m/s².
pub const MAX_DECELERATION: f64 = 9.8;

// Absorbs float noise in `now − t0 ≥ delay` when both times are tick multiples.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stimulus {
    Sight,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    pub perception_reaction_time: f64,
    pub braking_decel: f64,
    pub reacts_to: Stimulus,
}

impl DriverConfig {
    pub fn hdv() -> Self {
        DriverConfig {
            perception_reaction_time: 1.0,
            braking_decel: 7.5,
            reacts_to: Stimulus::Sight,
        }
    }

    pub fn cv() -> Self {
        DriverConfig {
            perception_reaction_time: 1.0,
            braking_decel: 6.2,
            reacts_to: Stimulus::Warning,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.perception_reaction_time >= 0.0 && self.perception_reaction_time.is_finite()) {
            return Err(format!(
                "perception_reaction_time must be >= 0, got {}",
                self.perception_reaction_time
            ));
        }
        if !(self.braking_decel > 0.0 && self.braking_decel <= MAX_DECELERATION) {
            return Err(format!(
                "braking_decel must be in (0, {MAX_DECELERATION}], got {}",
                self.braking_decel
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianConfig {
    pub reacts_to_warning: bool,
    pub stop_reaction_time: f64,
    /// Distance past the conflict point at which the crossing counts as done.
    #[serde(default = "default_exit_margin")]
    pub exit_margin: f64,
}

fn default_exit_margin() -> f64 {
    3.5
}

impl Default for PedestrianConfig {
    fn default() -> Self {
        PedestrianConfig {
            reacts_to_warning: true,
            stop_reaction_time: 0.5,
            exit_margin: default_exit_margin(),
        }
    }
}

impl PedestrianConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.stop_reaction_time >= 0.0 && self.stop_reaction_time.is_finite()) {
            return Err(format!(
                "stop_reaction_time must be >= 0, got {}",
                self.stop_reaction_time
            ));
        }
        if !(self.exit_margin >= 0.0 && self.exit_margin.is_finite()) {
            return Err(format!("exit_margin must be >= 0, got {}", self.exit_margin));
        }
        Ok(())
    }
}

/// What a sight-reacting driver remembers across ticks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriverMemory {
    pub perceived_at: Option<f64>,
}

fn elapsed(since: Option<f64>, delay: f64, now: f64) -> bool {
    since.is_some_and(|t0| now - t0 + TIME_EPS >= delay)
}

fn brake_until_stopped(vehicle: &VehicleState, config: &DriverConfig) -> f64 {
    if vehicle.speed > 0.0 {
        -config.braking_decel.min(MAX_DECELERATION)
    } else {
        0.0
    }
}

/// Human driver without connectivity: brakes one reaction time after first
/// seeing a pedestrian who is actually on the crossing.
pub fn hdv_driver_policy(
    vehicle: &VehicleState,
    pedestrian: &PedestrianState,
    obstacles: &[Obstacle],
    config: &DriverConfig,
    memory: DriverMemory,
    now: f64,
) -> (DriverMemory, f64) {
    let mut memory = memory;
    if memory.perceived_at.is_none()
        && pedestrian.phase == CrossingPhase::Crossing
        && line_of_sight(vehicle.position, pedestrian.position, obstacles)
    {
        memory.perceived_at = Some(now);
    }
    let cmd = if elapsed(memory.perceived_at, config.perception_reaction_time, now) {
        brake_until_stopped(vehicle, config)
    } else {
        0.0
    };
    (memory, cmd)
}

/// Connected-vehicle driver: brakes one reaction time after the warning.
pub fn cv_driver_policy(vehicle: &VehicleState, config: &DriverConfig, now: f64) -> f64 {
    if elapsed(vehicle.warning_received_at, config.perception_reaction_time, now) {
        brake_until_stopped(vehicle, config)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PedestrianDecision {
    pub phase: CrossingPhase,
    pub speed: f64,
}

/// Signal-obeying pedestrian who starts on Walk, walks at constant speed and,
/// if configured, stops short of the conflict point after a warning.
pub fn pedestrian_policy(
    pedestrian: &PedestrianState,
    signal: &SignalState,
    config: &PedestrianConfig,
    walking_speed: f64,
    now: f64,
) -> PedestrianDecision {
    use CrossingPhase::*;
    let stay = |phase| PedestrianDecision { phase, speed: 0.0 };
    match pedestrian.phase {
        Waiting if signal.pedestrian_light == PedestrianLight::Walk => PedestrianDecision {
            phase: Crossing,
            speed: walking_speed,
        },
        Waiting => stay(Waiting),
        Crossing if pedestrian.distance_to_conflict <= -config.exit_margin => stay(Crossed),
        Crossing
            if config.reacts_to_warning
                && pedestrian.distance_to_conflict > 0.0
                && elapsed(pedestrian.warning_received_at, config.stop_reaction_time, now) =>
        {
            stay(StoppedByWarning)
        }
        Crossing => PedestrianDecision {
            phase: Crossing,
            speed: walking_speed,
        },
        terminal => stay(terminal),
    }
}
