//! The four simulation nodes and the loop that drives them over a transport.
//!
//! Every node publishes its tick-0 state, then repeats: wait at the barrier,
//! read what the others published during the previous tick, compute and
//! publish this tick.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::aeb::{aeb_step, detect_pedestrian, AebEvent, AebState};
use crate::agents::{
    cv_driver_policy, hdv_driver_policy, pedestrian_policy, DriverMemory, PedestrianDecision, MAX_DECELERATION,
};
use crate::bus::{topics, Envelope, Transport};
use crate::pose::{PoseBridge, PoseMessage};
use crate::scenario::{Experiment, Scenario};
use crate::warning::{compute_ttc, dispatch, evaluate_trigger, record_receipt, Recipient};
use crate::world::{
    eta_to_conflict, step_pedestrian, step_vehicle, CrossingPhase, PedestrianState, SignalState, VehicleState,
};

/// Full-throttle acceleration for a human driving from the console.
pub const MAX_THROTTLE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Vehicle,
    Pedestrian,
    Signal,
    Warning,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Vehicle, Role::Pedestrian, Role::Signal, Role::Warning];

    pub fn node_name(self) -> &'static str {
        match self {
            Role::Vehicle => "vehicle",
            Role::Pedestrian => "pedestrian",
            Role::Signal => "signal",
            Role::Warning => "warning",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.node_name())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.node_name() == s)
            .ok_or_else(|| format!("unknown role {s:?} (expected vehicle, pedestrian, signal or warning)"))
    }
}

/// Payload of `control.vehicle`: pedal position, −1 full brake to +1 full throttle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleControl {
    pub command: f64,
}

/// Payload of `control.pedestrian`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianControl {
    pub walk: bool,
}

type Outgoing = Vec<(&'static str, Value)>;

fn json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("bus payloads serialize")
}

trait NodeLogic {
    fn subscriptions(&self) -> &'static [&'static str];
    fn initial(&mut self) -> Outgoing;
    fn step(&mut self, tick: u64, inbox: &[Envelope]) -> Result<Outgoing, HarnessError>;
}

fn missing(role: Role, what: &str, tick: u64) -> HarnessError {
    HarnessError::Node {
        role: role.to_string(),
        message: format!("no {what} received before tick {tick}"),
    }
}

struct VehicleNode {
    scenario: Scenario,
    state: VehicleState,
    pedestrian: Option<PedestrianState>,
    memory: DriverMemory,
    aeb: AebState,
    human: Option<f64>,
}

impl NodeLogic for VehicleNode {
    fn subscriptions(&self) -> &'static [&'static str] {
        &[topics::PEDESTRIAN_STATE, topics::WARNING_EVENT, topics::CONTROL_VEHICLE]
    }

    fn initial(&mut self) -> Outgoing {
        vec![(topics::VEHICLE_STATE, json(&self.state))]
    }

    fn step(&mut self, tick: u64, inbox: &[Envelope]) -> Result<Outgoing, HarnessError> {
        let s = &self.scenario;
        let now = tick as f64 * s.dt;
        for env in inbox {
            match env.topic.as_str() {
                topics::PEDESTRIAN_STATE => self.pedestrian = Some(env.decode()?),
                topics::WARNING_EVENT => {
                    record_receipt(&mut self.state.warning_received_at, &env.decode()?, Recipient::Vehicle, now)
                }
                topics::CONTROL_VEHICLE => {
                    let c: VehicleControl = env.decode()?;
                    if c.command.is_finite() {
                        self.human = Some(c.command.clamp(-1.0, 1.0));
                    }
                }
                _ => {}
            }
        }
        let ped = self
            .pedestrian
            .as_ref()
            .ok_or_else(|| missing(Role::Vehicle, "pedestrian.state", tick))?;
        let mut out = Outgoing::new();

        let cmd = match (self.human, s.experiment) {
            (Some(c), _) if c >= 0.0 => c * MAX_THROTTLE,
            (Some(c), _) => c * MAX_DECELERATION,
            (None, Experiment::HdvPed) => {
                let (memory, cmd) =
                    hdv_driver_policy(&self.state, ped, &s.obstacles, &s.agents.hdv_driver, self.memory, now);
                self.memory = memory;
                cmd
            }
            (None, Experiment::AvPed) => {
                let ttc = compute_ttc(&self.state, ped);
                let detected = detect_pedestrian(&self.state, ped, &s.obstacles);
                let was_latched = self.aeb.latched;
                let (aeb, cmd) = aeb_step(self.aeb, &ttc, detected, s.ttc_threshold, now);
                self.aeb = aeb;
                if aeb.latched && !was_latched {
                    self.state.aeb_activated_at = aeb.activated_at;
                    let event = AebEvent {
                        vehicle: self.state.id.clone(),
                        tick,
                        activated_at: now,
                        ttc: ttc.ttc,
                    };
                    out.push((topics::AEB_EVENT, json(&event)));
                }
                cmd
            }
            (None, Experiment::CvPed) => cv_driver_policy(&self.state, &s.agents.cv_driver, now),
        };
        if cmd < 0.0 && self.state.braking_started_at.is_none() && self.state.speed > 0.0 {
            self.state.braking_started_at = Some(now);
        }
        self.state = step_vehicle(&self.state, cmd, s.dt)?;
        out.push((topics::VEHICLE_STATE, json(&self.state)));
        Ok(out)
    }
}

struct PedestrianNode {
    scenario: Scenario,
    state: PedestrianState,
    signal: SignalState,
    human_walk: Option<bool>,
    human_speed: f64,
    pose: PoseBridge,
}

impl PedestrianNode {
    fn human_decision(&self, walk: bool) -> PedestrianDecision {
        use CrossingPhase::*;
        let exit = self.scenario.agents.pedestrian.exit_margin;
        let p = &self.state;
        let go = |speed| PedestrianDecision { phase: Crossing, speed };
        match p.phase {
            Crossing if p.distance_to_conflict <= -exit => PedestrianDecision { phase: Crossed, speed: 0.0 },
            Waiting | Crossing if walk => go(self.human_speed),
            Crossing => go(0.0),
            phase => PedestrianDecision { phase, speed: 0.0 },
        }
    }
}

impl NodeLogic for PedestrianNode {
    fn subscriptions(&self) -> &'static [&'static str] {
        &[
            topics::SIGNAL_STATE,
            topics::WARNING_EVENT,
            topics::CONTROL_PEDESTRIAN,
            topics::PEDESTRIAN_POSE,
        ]
    }

    fn initial(&mut self) -> Outgoing {
        vec![(topics::PEDESTRIAN_STATE, json(&self.state))]
    }

    fn step(&mut self, tick: u64, inbox: &[Envelope]) -> Result<Outgoing, HarnessError> {
        let s = &self.scenario;
        let now = tick as f64 * s.dt;
        for env in inbox {
            match env.topic.as_str() {
                topics::SIGNAL_STATE => self.signal = env.decode()?,
                topics::WARNING_EVENT => {
                    record_receipt(&mut self.state.warning_received_at, &env.decode()?, Recipient::Pedestrian, now)
                }
                topics::CONTROL_PEDESTRIAN => {
                    let c: PedestrianControl = env.decode()?;
                    self.human_walk = Some(c.walk);
                    self.human_speed = s.v_pedestrian;
                }
                topics::PEDESTRIAN_POSE => {
                    // A bad camera frame or tracker glitch keeps the previous pose.
                    let Ok(msg) = env.decode::<PoseMessage>() else { continue };
                    if self.pose.ingest(&msg).is_ok() {
                        if let Some(loco) = self.pose.locomotion() {
                            self.human_walk = Some(loco.walking);
                            self.human_speed = loco.speed;
                        }
                    }
                }
                _ => {}
            }
        }
        let decision = match self.human_walk {
            Some(walk) => self.human_decision(walk),
            None => pedestrian_policy(&self.state, &self.signal, &s.agents.pedestrian, s.v_pedestrian, now),
        };
        self.state = step_pedestrian(&self.state, decision.phase, decision.speed, s.dt)?;
        Ok(vec![(topics::PEDESTRIAN_STATE, json(&self.state))])
    }
}

struct SignalNode {
    scenario: Scenario,
    state: SignalState,
    vehicle: Option<VehicleState>,
}

impl NodeLogic for SignalNode {
    fn subscriptions(&self) -> &'static [&'static str] {
        &[topics::VEHICLE_STATE]
    }

    fn initial(&mut self) -> Outgoing {
        vec![(topics::SIGNAL_STATE, json(&self.state))]
    }

    fn step(&mut self, tick: u64, inbox: &[Envelope]) -> Result<Outgoing, HarnessError> {
        for env in inbox.iter().filter(|e| e.topic == topics::VEHICLE_STATE) {
            self.vehicle = Some(env.decode()?);
        }
        let v = self
            .vehicle
            .as_ref()
            .ok_or_else(|| missing(Role::Signal, "vehicle.state", tick))?;
        let eta = eta_to_conflict(v.distance_to_conflict, v.speed);
        let now = tick as f64 * self.scenario.dt;
        self.state = crate::world::update_signal(self.state, eta, self.scenario.signal_eta_trigger, now);
        Ok(vec![(topics::SIGNAL_STATE, json(&self.state))])
    }
}

struct WarningNode {
    scenario: Scenario,
    vehicle: Option<VehicleState>,
    pedestrian: Option<PedestrianState>,
}

impl NodeLogic for WarningNode {
    fn subscriptions(&self) -> &'static [&'static str] {
        &[topics::VEHICLE_STATE, topics::PEDESTRIAN_STATE]
    }

    fn initial(&mut self) -> Outgoing {
        Outgoing::new()
    }

    fn step(&mut self, tick: u64, inbox: &[Envelope]) -> Result<Outgoing, HarnessError> {
        for env in inbox {
            match env.topic.as_str() {
                topics::VEHICLE_STATE => self.vehicle = Some(env.decode()?),
                topics::PEDESTRIAN_STATE => self.pedestrian = Some(env.decode()?),
                _ => {}
            }
        }
        let (Some(v), Some(p)) = (&self.vehicle, &self.pedestrian) else {
            return Err(missing(Role::Warning, "vehicle and pedestrian state", tick));
        };
        let s = &self.scenario;
        let ttc = compute_ttc(v, p);
        let trigger = evaluate_trigger(&ttc, s.ttc_threshold);
        let event = dispatch(trigger, s.experiment, tick, tick as f64 * s.dt, &ttc);
        Ok(event
            .map(|e| vec![(topics::WARNING_EVENT, json(&e))])
            .unwrap_or_default())
    }
}

fn logic_for(role: Role, scenario: &Scenario) -> Box<dyn NodeLogic> {
    let scenario = scenario.clone();
    match role {
        Role::Vehicle => Box::new(VehicleNode {
            state: scenario.initial_vehicle(),
            scenario,
            pedestrian: None,
            memory: DriverMemory::default(),
            aeb: AebState::default(),
            human: None,
        }),
        Role::Pedestrian => Box::new(PedestrianNode {
            state: scenario.initial_pedestrian(),
            human_speed: scenario.v_pedestrian,
            scenario,
            signal: SignalState::default(),
            human_walk: None,
            pose: PoseBridge::default(),
        }),
        Role::Signal => Box::new(SignalNode {
            scenario,
            state: SignalState::default(),
            vehicle: None,
        }),
        Role::Warning => Box::new(WarningNode {
            scenario,
            vehicle: None,
            pedestrian: None,
        }),
    }
}

/// Random sub-millisecond stalls before each publish. Stresses the barrier
/// without affecting any output.
#[derive(Debug)]
pub struct Jitter(Option<ChaCha8Rng>);

impl Jitter {
    pub const MAX_MICROS: u64 = 200;

    pub fn new(seed: Option<u64>, role: Role) -> Self {
        Jitter(seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ (role as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn pause(&mut self) {
        if let Some(rng) = &mut self.0 {
            let us = rng.gen_range(0..=Self::MAX_MICROS);
            std::thread::sleep(Duration::from_micros(us));
        }
    }
}

/// Runs one node to completion over `transport`.
pub fn run_node(
    role: Role,
    scenario: &Scenario,
    transport: &mut dyn Transport,
    jitter_seed: Option<u64>,
) -> Result<(), HarnessError> {
    let mut logic = logic_for(role, scenario);
    let mut jitter = Jitter::new(jitter_seed, role);
    for topic in logic.subscriptions() {
        transport.subscribe(topic)?;
    }
    let mut tick = 0;
    let mut out = logic.initial();
    loop {
        jitter.pause();
        for (topic, payload) in out {
            transport.publish(topic, tick, payload)?;
        }
        let grant = transport.arrive(tick, false)?;
        if grant.stop {
            return Ok(());
        }
        tick = grant.tick;
        out = logic.step(tick, &grant.envelopes)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warning::WarningEvent;
    use crate::world::PedestrianLight;
    use serde_json::json;

    fn env(topic: &str, tick: u64, payload: Value) -> Envelope {
        Envelope::new(topic, tick, 0, "test", payload)
    }

    #[test]
    fn role_names_round_trip() {
        for r in Role::ALL {
            assert_eq!(r.node_name().parse::<Role>().unwrap(), r);
        }
        assert!("harness".parse::<Role>().is_err());
    }

    #[test]
    fn human_brake_overrides_policy() {
        let s = Scenario::default().with_experiment(Experiment::HdvPed);
        let mut node = VehicleNode {
            state: s.initial_vehicle(),
            pedestrian: Some(s.initial_pedestrian()),
            scenario: s,
            memory: DriverMemory::default(),
            aeb: AebState::default(),
            human: None,
        };
        let out = node
            .step(1, &[env(topics::CONTROL_VEHICLE, 0, json!({"command": -2.0}))])
            .unwrap();
        let v: VehicleState = serde_json::from_value(out[0].1.clone()).unwrap();
        assert_eq!(v.accel_cmd, -MAX_DECELERATION);
        assert_eq!(v.braking_started_at, Some(0.02));
        // Sticky until the next command.
        let out = node.step(2, &[]).unwrap();
        let v: VehicleState = serde_json::from_value(out[0].1.clone()).unwrap();
        assert_eq!(v.accel_cmd, -MAX_DECELERATION);
        let out = node
            .step(3, &[env(topics::CONTROL_VEHICLE, 2, json!({"command": 0.5}))])
            .unwrap();
        let v: VehicleState = serde_json::from_value(out[0].1.clone()).unwrap();
        assert_eq!(v.accel_cmd, 0.5 * MAX_THROTTLE);
    }

    #[test]
    fn pedestrian_walks_on_console_command_regardless_of_signal() {
        let s = Scenario::default();
        let mut node = logic_for(Role::Pedestrian, &s);
        let signal = SignalState {
            pedestrian_light: PedestrianLight::DontWalk,
            changed_at: None,
        };
        let out = node
            .step(
                1,
                &[
                    env(topics::SIGNAL_STATE, 0, json(&signal)),
                    env(topics::CONTROL_PEDESTRIAN, 0, json!({"walk": true})),
                ],
            )
            .unwrap();
        let p: PedestrianState = serde_json::from_value(out[0].1.clone()).unwrap();
        assert_eq!(p.phase, CrossingPhase::Crossing);
        assert_eq!(p.speed, s.v_pedestrian);
        let out = node
            .step(2, &[env(topics::CONTROL_PEDESTRIAN, 1, json!({"walk": false}))])
            .unwrap();
        let p: PedestrianState = serde_json::from_value(out[0].1.clone()).unwrap();
        assert_eq!((p.phase, p.speed), (CrossingPhase::Crossing, 0.0));
    }

    #[test]
    fn warning_node_dispatches_per_experiment() {
        let s = Scenario::default();
        let mut v = s.initial_vehicle();
        let mut p = s.initial_pedestrian();
        // 11 m at 11 m/s against 1 m at 1 m/s: TTC 0.
        v.distance_to_conflict = 11.0;
        v.speed = 11.0;
        p.distance_to_conflict = 1.0;
        p.speed = 1.0;
        p.phase = CrossingPhase::Crossing;
        let inbox = [
            env(topics::VEHICLE_STATE, 4, json(&v)),
            env(topics::PEDESTRIAN_STATE, 4, json(&p)),
        ];
        for (exp, expected) in [(Experiment::HdvPed, None), (Experiment::AvPed, Some(0)), (Experiment::CvPed, Some(2))] {
            let mut node = logic_for(Role::Warning, &s.clone().with_experiment(exp));
            let out = node.step(5, &inbox).unwrap();
            let got = out.first().map(|(_, e)| {
                let e: WarningEvent = serde_json::from_value(e.clone()).unwrap();
                assert_eq!(e.tick, 5);
                e.recipients.len()
            });
            assert_eq!(got, expected, "{exp}");
        }
    }

    #[test]
    fn nodes_fail_without_inputs() {
        let s = Scenario::default();
        for role in [Role::Vehicle, Role::Signal, Role::Warning] {
            let err = logic_for(role, &s).step(1, &[]).err().unwrap();
            assert!(err.to_string().contains(role.node_name()), "{err}");
        }
    }

    #[test]
    fn jitter_is_seeded_per_role() {
        let draw = |seed, role| {
            let mut j = Jitter::new(Some(seed), role);
            (0..8).map(|_| j.0.as_mut().unwrap().gen::<u64>()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7, Role::Vehicle), draw(7, Role::Vehicle));
        assert_ne!(draw(7, Role::Vehicle), draw(7, Role::Signal));
        Jitter::new(None, Role::Vehicle).pause();
    }
}
