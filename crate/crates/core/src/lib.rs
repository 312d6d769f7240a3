//! Deterministic co-simulation of a vehicle–pedestrian conflict at a
//! signalized mid-block crossing, comparing a human-driven vehicle, an
//! automated vehicle with emergency braking, and a connected vehicle that
//! receives collision warnings.
//!
//! Simulation nodes exchange JSON envelopes over a lockstep bus, in process
//! or over TCP. See [`harness::run_experiment`] for the entry point.

pub mod aeb;
pub mod agents;
pub mod bus;
pub mod harness;
pub mod pose;
pub mod scenario;
pub mod warning;
pub mod world;

pub use aeb::{aeb_deceleration, aeb_step, AebEvent, AebState};
pub use agents::{DriverConfig, PedestrianConfig, MAX_DECELERATION};
pub use bus::{Broker, BrokerConfig, BusError, Envelope, Grant, InProcessTransport, Transport};
pub use harness::{
    compute_metrics, emit_traces, replay, run_experiment, run_experiment_with, ExperimentMetrics, HarnessError,
    Outcome, Role, RunOptions, RunOutput, RunTrace,
};
pub use pose::{detect_locomotion, parse_keypoint_frame, KeypointFrame, LocomotionState, PoseError, TrackerSample};
pub use scenario::{Experiment, Scenario, ScenarioError};
pub use warning::{compute_ttc, evaluate_trigger, TtcResult, WarningEvent};
pub use world::{
    line_of_sight, CrossingPhase, Obstacle, PedestrianLight, PedestrianState, SignalState, Vec2, VehicleKind,
    VehicleState,
};
