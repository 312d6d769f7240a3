//! Occlusion-gated automatic emergency braking with the dry-road
//! gradient deceleration profile.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::warning::{evaluate_trigger, TtcResult};
use crate::world::{line_of_sight, Obstacle, PedestrianState, VehicleState, FT_TO_M};

/// Dead time before the brakes bite, s.
pub const DEAD_TIME: f64 = 0.25;
/// End of the linear build-up, s.
pub const RAMP_END: f64 = 0.6;
/// Build-up rate, ft/s³.
pub const RAMP_RATE_FT: f64 = 65.7;
/// Sustained deceleration, ft/s².
pub const PLATEAU_FT: f64 = 23.0;

/// Peak commanded deceleration in m/s² (23 ft/s²).
pub const PEAK_DECELERATION: f64 = PLATEAU_FT * FT_TO_M;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("time since AEB activation must be non-negative and finite, got {0}")]
pub struct NegativeElapsed(pub f64);

/// Profile deceleration magnitude in m/s², `t` seconds after activation.
///
/// The ramp ends at 22.995 ft/s²; `t = 0.6` itself takes the 23 ft/s² plateau
/// so the profile stays monotone.
pub fn aeb_deceleration(t: f64) -> Result<f64, NegativeElapsed> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(NegativeElapsed(t));
    }
    let ft = if t < DEAD_TIME {
        0.0
    } else if t < RAMP_END {
        RAMP_RATE_FT * (t - DEAD_TIME)
    } else {
        PLATEAU_FT
    };
    Ok(ft * FT_TO_M)
}

/// The lidar sees the pedestrian whenever nothing blocks the sight line.
pub fn detect_pedestrian(
    vehicle: &VehicleState,
    pedestrian: &PedestrianState,
    obstacles: &[Obstacle],
) -> bool {
    line_of_sight(vehicle.position, pedestrian.position, obstacles)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AebState {
    pub activated_at: Option<f64>,
    pub latched: bool,
}

/// Published once, at the tick the AEB latches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AebEvent {
    pub vehicle: String,
    pub tick: u64,
    pub activated_at: f64,
    pub ttc: Option<f64>,
}

/// One controller tick. Returns the new state and the acceleration command
/// (non-positive). Once latched the profile runs to the end of the run
/// regardless of what the sensors report.
pub fn aeb_step(
    state: AebState,
    ttc: &TtcResult,
    detected: bool,
    threshold: f64,
    now: f64,
) -> (AebState, f64) {
    let state = if !state.latched && detected && evaluate_trigger(ttc, threshold) {
        AebState {
            activated_at: Some(now),
            latched: true,
        }
    } else {
        state
    };
    let cmd = match state.activated_at {
        // Clamp guards the `now − t0` float noise at the activation tick.
        Some(t0) if state.latched => -aeb_deceleration((now - t0).max(0.0)).unwrap_or(0.0),
        _ => 0.0,
    };
    (state, cmd)
}
