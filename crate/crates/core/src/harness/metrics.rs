use serde::{Deserialize, Serialize};

use super::trace::{Outcome, RunTrace, TraceRecord};
use crate::scenario::Experiment;

/// Summary of one experiment run. Distances are measured along the vehicle
/// path to the zebra line; `None` means the event never happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub experiment: Experiment,
    pub braking_point: Option<f64>,
    pub v2p_distance: Option<f64>,
    pub avg_deceleration: Option<f64>,
    pub max_deceleration: Option<f64>,
    pub braking_onset_time: Option<f64>,
    pub stop_time: Option<f64>,
    pub pedestrian_reached_conflict: bool,
    pub collision: bool,
    pub outcome: Option<Outcome>,
    pub ticks: u64,
}

/// Derives the run summary from a trace.
///
/// Braking onset is the first tick whose commanded deceleration reaches
/// `onset_threshold`; the braking point is where the vehicle was when that
/// command was applied. The braking period runs through the first tick at
/// rest. On that last tick the speed clamps at zero part way through the
/// step, so only the fraction `v_prev / decel` of it counts as braking time.
pub fn compute_metrics(trace: &RunTrace, onset_threshold: f64) -> ExperimentMetrics {
    let r = &trace.records;
    let collision = trace.outcome == Some(Outcome::Collision);
    let mut m = ExperimentMetrics {
        experiment: trace.experiment,
        braking_point: None,
        v2p_distance: None,
        avg_deceleration: None,
        max_deceleration: None,
        braking_onset_time: None,
        stop_time: None,
        pedestrian_reached_conflict: r.iter().any(|x| x.pedestrian_distance <= 0.0),
        collision,
        outcome: trace.outcome,
        ticks: r.len() as u64,
    };

    let Some(onset) = r.iter().position(|x| -x.accel_cmd >= onset_threshold && x.tick > 0) else {
        return m;
    };
    let before: &TraceRecord = &r[onset - 1];
    m.braking_point = Some(before.vehicle_to_zebra);
    m.braking_onset_time = Some(before.sim_time);

    let stop = r[onset..].iter().position(|x| x.vehicle_speed == 0.0).map(|i| onset + i);
    let end = stop.unwrap_or(r.len() - 1);
    let period = &r[onset..=end];
    m.max_deceleration = period.iter().map(|x| -x.accel_cmd).reduce(f64::max);

    let mut duration = 0.0;
    let mut prev_speed = before.vehicle_speed;
    for x in period {
        let decel = -x.accel_cmd;
        let step = if x.vehicle_speed == 0.0 && decel > 0.0 {
            (prev_speed / decel).min(trace.dt)
        } else {
            trace.dt
        };
        duration += step;
        prev_speed = x.vehicle_speed;
    }
    if duration > 0.0 {
        m.avg_deceleration = Some((before.vehicle_speed - r[end].vehicle_speed) / duration);
    }
    if let Some(s) = stop {
        m.v2p_distance = Some(r[s].vehicle_to_zebra);
        m.stop_time = Some(before.sim_time + duration);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{CrossingPhase, PedestrianLight};

    // Direct integration of a constant command, independent of world::step_vehicle.
    fn braking_trace(v0: f64, decel: f64, coast_ticks: u64, dt: f64) -> RunTrace {
        let mut trace = RunTrace::new(Experiment::HdvPed, dt);
        let (mut v, mut x) = (v0, 50.0);
        let mut tick = 0;
        loop {
            let a = if tick <= coast_ticks { 0.0 } else { -decel };
            if tick > 0 {
                v = f64::max(0.0, v + a * dt);
                x -= v * dt;
            }
            trace.records.push(TraceRecord {
                tick,
                sim_time: tick as f64 * dt,
                vehicle_speed: v,
                vehicle_distance: x,
                vehicle_to_zebra: x,
                accel_cmd: a,
                pedestrian_speed: 0.0,
                pedestrian_distance: 2.0,
                pedestrian_phase: CrossingPhase::Waiting,
                signal: PedestrianLight::DontWalk,
                events: vec![],
            });
            if v == 0.0 {
                break;
            }
            tick += 1;
        }
        trace.outcome = Some(Outcome::Completed);
        trace
    }

    #[test]
    fn constant_braking_average_is_exact() {
        let t = braking_trace(11.176, 7.0104, 10, 0.02);
        let m = compute_metrics(&t, 0.5);
        assert!((m.avg_deceleration.unwrap() - 7.0104).abs() < 1e-9);
        assert_eq!(m.max_deceleration, Some(7.0104));
        assert_eq!(m.braking_point, Some(t.records[10].vehicle_to_zebra));
        assert_eq!(m.v2p_distance, Some(t.records.last().unwrap().vehicle_to_zebra));
        assert!((m.stop_time.unwrap() - (0.2 + 11.176 / 7.0104)).abs() < 1e-9);
        assert!(!m.pedestrian_reached_conflict);
        assert!(!m.collision);
    }

    #[test]
    fn no_braking_leaves_fields_empty() {
        let mut t = braking_trace(10.0, 5.0, 1000, 0.02);
        t.records.truncate(20);
        let m = compute_metrics(&t, 0.5);
        assert_eq!(m.braking_point, None);
        assert_eq!(m.avg_deceleration, None);
        assert_eq!(m.v2p_distance, None);
    }

    #[test]
    fn light_braking_under_threshold_is_not_onset() {
        let t = braking_trace(2.0, 0.3, 2, 0.02);
        assert_eq!(compute_metrics(&t, 0.5).braking_point, None);
        assert!(compute_metrics(&t, 0.2).braking_point.is_some());
    }

    #[test]
    fn unfinished_stop_averages_partial_period() {
        let mut t = braking_trace(10.0, 4.0, 0, 0.02);
        t.records.truncate(51);
        let m = compute_metrics(&t, 0.5);
        assert_eq!(m.v2p_distance, None);
        assert!((m.avg_deceleration.unwrap() - 4.0).abs() < 1e-9);
    }
}
