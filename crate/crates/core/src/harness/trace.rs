use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::aeb::AebEvent;
use crate::bus::{topics, Envelope};
use crate::scenario::{Experiment, Scenario};
use crate::warning::WarningEvent;
use crate::world::{CrossingPhase, PedestrianLight, PedestrianState, SignalState, VehicleState};

/// Everything published on the bus for one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub tick: u64,
    pub sim_time: f64,
    pub vehicle: VehicleState,
    pub pedestrian: PedestrianState,
    pub signal: SignalState,
    pub warnings: Vec<WarningEvent>,
    pub aeb: Option<AebEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    SignalWalk,
    Warning,
    AebActivated,
    BrakingStarted,
    VehicleStopped,
    PedestrianStopped,
    PedestrianCrossed,
    Collision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub sim_time: f64,
    pub vehicle_speed: f64,
    pub vehicle_distance: f64,
    pub vehicle_to_zebra: f64,
    pub accel_cmd: f64,
    pub pedestrian_speed: f64,
    pub pedestrian_distance: f64,
    pub pedestrian_phase: CrossingPhase,
    pub signal: PedestrianLight,
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Vehicle at rest or clear of the crossing, pedestrian done.
    Completed,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub experiment: Experiment,
    pub dt: f64,
    pub records: Vec<TraceRecord>,
    pub outcome: Option<Outcome>,
}

impl RunTrace {
    pub fn new(experiment: Experiment, dt: f64) -> Self {
        RunTrace {
            experiment,
            dt,
            records: Vec::new(),
            outcome: None,
        }
    }

    /// First record whose events include `event`.
    pub fn first(&self, event: TraceEvent) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.events.contains(&event))
    }
}

/// Assembles world states and the run trace from released bus traffic.
/// Live runs and replays go through the same builder.
#[derive(Debug, Default)]
pub struct TraceBuilder {
    scenario: Option<Scenario>,
    trace: Option<RunTrace>,
    previous: Option<WorldState>,
}

impl TraceBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn scenario(&self) -> Option<&Scenario> {
        self.scenario.as_ref()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.trace.as_ref().and_then(|t| t.outcome)
    }

    pub fn is_done(&self) -> bool {
        self.outcome().is_some()
    }

    /// Folds in everything published at `tick`. Ticks after the run outcome
    /// is decided are ignored.
    pub fn ingest_tick(&mut self, tick: u64, envelopes: &[Envelope]) -> Result<Option<&WorldState>, HarnessError> {
        if self.is_done() {
            return Ok(None);
        }
        let (mut vehicle, mut pedestrian, mut signal) = (None, None, None);
        let mut warnings = Vec::new();
        let mut aeb = None;
        for env in envelopes {
            if env.tick != tick {
                return Err(HarnessError::Trace(format!(
                    "envelope from tick {} in the batch for tick {tick}",
                    env.tick
                )));
            }
            match env.topic.as_str() {
                topics::RUN_SCENARIO => {
                    let mut s: Scenario = env.decode()?;
                    s.normalize()?;
                    self.trace = Some(RunTrace::new(s.experiment, s.dt));
                    self.scenario = Some(s);
                }
                topics::VEHICLE_STATE => vehicle = Some(env.decode::<VehicleState>()?),
                topics::PEDESTRIAN_STATE => pedestrian = Some(env.decode::<PedestrianState>()?),
                topics::SIGNAL_STATE => signal = Some(env.decode::<SignalState>()?),
                topics::WARNING_EVENT => warnings.push(env.decode::<WarningEvent>()?),
                topics::AEB_EVENT => aeb = Some(env.decode::<AebEvent>()?),
                _ => {}
            }
        }
        let scenario = self
            .scenario
            .as_ref()
            .ok_or_else(|| HarnessError::Trace("no run.scenario before the first world state".into()))?;
        let missing = |what: &str| HarnessError::Trace(format!("tick {tick} has no {what}"));
        let world = WorldState {
            tick,
            sim_time: tick as f64 * scenario.dt,
            vehicle: vehicle.ok_or_else(|| missing("vehicle.state"))?,
            pedestrian: pedestrian.ok_or_else(|| missing("pedestrian.state"))?,
            signal: signal.ok_or_else(|| missing("signal.state"))?,
            warnings,
            aeb,
        };

        let (record, outcome) = record_for(scenario, self.previous.as_ref(), &world);
        let trace = self.trace.as_mut().expect("trace exists with scenario");
        if let Some(last) = trace.records.last() {
            if last.tick + 1 != tick {
                return Err(HarnessError::Trace(format!("tick {tick} follows tick {}", last.tick)));
            }
        }
        trace.records.push(record);
        trace.outcome = outcome;
        self.previous = Some(world);
        Ok(self.previous.as_ref())
    }

    pub fn finish(self) -> Result<RunTrace, HarnessError> {
        self.trace
            .ok_or_else(|| HarnessError::Trace("no run.scenario in the recording".into()))
    }
}

fn record_for(scenario: &Scenario, prev: Option<&WorldState>, w: &WorldState) -> (TraceRecord, Option<Outcome>) {
    let mut events = Vec::new();
    let (v, p) = (&w.vehicle, &w.pedestrian);
    let changed = |f: &dyn Fn(&WorldState) -> bool| f(w) && !prev.is_some_and(|pw| f(pw));

    if changed(&|s| s.signal.pedestrian_light == PedestrianLight::Walk) {
        events.push(TraceEvent::SignalWalk);
    }
    if !w.warnings.is_empty() {
        events.push(TraceEvent::Warning);
    }
    if w.aeb.is_some() {
        events.push(TraceEvent::AebActivated);
    }
    if changed(&|s| s.vehicle.accel_cmd < 0.0) && prev.is_some() {
        events.push(TraceEvent::BrakingStarted);
    }
    if changed(&|s| s.vehicle.speed == 0.0) {
        events.push(TraceEvent::VehicleStopped);
    }
    if changed(&|s| s.pedestrian.phase == CrossingPhase::StoppedByWarning) {
        events.push(TraceEvent::PedestrianStopped);
    }
    if changed(&|s| s.pedestrian.phase == CrossingPhase::Crossed) {
        events.push(TraceEvent::PedestrianCrossed);
    }
    let collision = scenario.collides(v, p.position);
    if collision {
        events.push(TraceEvent::Collision);
    }

    let vehicle_settled =
        v.speed == 0.0 || v.distance_to_conflict <= -scenario.vehicle_footprint.length;
    let outcome = if collision {
        Some(Outcome::Collision)
    } else if vehicle_settled && p.phase.is_terminal() {
        Some(Outcome::Completed)
    } else if w.sim_time + 1e-9 >= scenario.max_sim_time {
        Some(Outcome::Timeout)
    } else {
        None
    };

    let record = TraceRecord {
        tick: w.tick,
        sim_time: w.sim_time,
        vehicle_speed: v.speed,
        vehicle_distance: v.distance_to_conflict,
        vehicle_to_zebra: scenario.distance_to_zebra(v.position),
        accel_cmd: v.accel_cmd,
        pedestrian_speed: p.speed,
        pedestrian_distance: p.distance_to_conflict,
        pedestrian_phase: p.phase,
        signal: w.signal.pedestrian_light,
        events,
    };
    (record, outcome)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = [f64; 3]>) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let body = || -> std::io::Result<()> {
        writeln!(w, "{header}")?;
        for [a, b, c] in rows {
            writeln!(w, "{a:.6},{b:.6},{c:.6}")?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

/// Writes the speed-time and space-time CSVs. In the space-time file the
/// vehicle's distance to the conflict point is positive and the pedestrian's
/// is negated, so the two approach the axis from opposite sides.
pub fn emit_traces(trace: &RunTrace, speed_time: &Path, space_time: &Path) -> Result<(), HarnessError> {
    write_csv(
        speed_time,
        "sim_time,vehicle_speed,pedestrian_speed",
        trace
            .records
            .iter()
            .map(|r| [r.sim_time, r.vehicle_speed, r.pedestrian_speed]),
    )?;
    write_csv(
        space_time,
        "sim_time,vehicle_distance,pedestrian_distance",
        trace
            .records
            .iter()
            .map(|r| [r.sim_time, r.vehicle_distance, -r.pedestrian_distance]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(tick: u64, speed: f64) -> TraceRecord {
        TraceRecord {
            tick,
            sim_time: tick as f64 * 0.02,
            vehicle_speed: speed,
            vehicle_distance: 10.0 - tick as f64,
            vehicle_to_zebra: 10.0 - tick as f64,
            accel_cmd: 0.0,
            pedestrian_speed: 1.0,
            pedestrian_distance: 3.0 - 0.02 * tick as f64,
            pedestrian_phase: CrossingPhase::Crossing,
            signal: PedestrianLight::Walk,
            events: vec![],
        }
    }

    #[test]
    fn csv_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("speed.csv"), dir.path().join("space.csv"));
        let mut trace = RunTrace::new(Experiment::CvPed, 0.02);
        trace.records = (0..3).map(|k| record(k, 11.0)).collect();
        emit_traces(&trace, &a, &b).unwrap();
        let speed = std::fs::read_to_string(&a).unwrap();
        let space = std::fs::read_to_string(&b).unwrap();
        assert_eq!(speed.lines().count(), 4);
        assert_eq!(speed.lines().next().unwrap(), "sim_time,vehicle_speed,pedestrian_speed");
        assert_eq!(speed.lines().nth(2).unwrap(), "0.020000,11.000000,1.000000");
        assert_eq!(space.lines().nth(1).unwrap(), "0.000000,10.000000,-3.000000");

        let empty = RunTrace::new(Experiment::CvPed, 0.02);
        emit_traces(&empty, &a, &b).unwrap();
        assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 1);
        assert_eq!(std::fs::read_to_string(&b).unwrap().lines().count(), 1);
    }

    #[test]
    fn io_failure_names_the_path() {
        let trace = RunTrace::new(Experiment::CvPed, 0.02);
        let bad = Path::new("/nonexistent-dir/x/speed.csv");
        let err = emit_traces(&trace, bad, bad).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x/speed.csv"));
    }

    #[test]
    fn builder_needs_scenario_first() {
        let mut b = TraceBuilder::new();
        assert!(b.ingest_tick(0, &[]).is_err());
    }
}
