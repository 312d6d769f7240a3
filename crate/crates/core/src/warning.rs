//! V2P collision warning: time-to-collision from arrival-time difference, a
//! strict threshold trigger, and per-experiment dispatch.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::scenario::Experiment;
use crate::world::{eta_to_conflict, PedestrianState, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TtcResult {
    pub t_veh: Option<f64>,
    pub t_ped: Option<f64>,
    pub ttc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipient {
    Vehicle,
    Pedestrian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningEvent {
    pub tick: u64,
    pub sim_time: f64,
    pub ttc: f64,
    pub recipients: BTreeSet<Recipient>,
}

impl WarningEvent {
    pub fn is_for(&self, who: Recipient) -> bool {
        self.recipients.contains(&who)
    }
}

/// Arrival-time difference at the conflict point; absent unless both
/// entities are moving toward it.
pub fn compute_ttc(vehicle: &VehicleState, pedestrian: &PedestrianState) -> TtcResult {
    let t_veh = eta_to_conflict(vehicle.distance_to_conflict, vehicle.speed);
    let t_ped = eta_to_conflict(pedestrian.distance_to_conflict, pedestrian.speed);
    let ttc = t_veh.zip(t_ped).map(|(v, p)| (v - p).abs());
    TtcResult { t_veh, t_ped, ttc }
}

pub fn evaluate_trigger(ttc: &TtcResult, threshold: f64) -> bool {
    ttc.ttc.is_some_and(|t| t < threshold)
}

/// Builds the warning for one tick.
///
/// Only the connected-vehicle experiment has anyone to warn. In the AV
/// experiment the event is still published, with no recipients, so bus
/// consumers can see the trigger that gates the AEB.
pub fn dispatch(
    trigger: bool,
    experiment: Experiment,
    tick: u64,
    sim_time: f64,
    ttc: &TtcResult,
) -> Option<WarningEvent> {
    let ttc = ttc.ttc.filter(|_| trigger)?;
    let recipients = match experiment {
        Experiment::HdvPed => return None,
        Experiment::AvPed => BTreeSet::new(),
        Experiment::CvPed => [Recipient::Vehicle, Recipient::Pedestrian].into(),
    };
    Some(WarningEvent {
        tick,
        sim_time,
        ttc,
        recipients,
    })
}

/// First-receipt bookkeeping for warnings; later events never move the stamp.
pub fn record_receipt(received_at: &mut Option<f64>, event: &WarningEvent, who: Recipient, now: f64) {
    if received_at.is_none() && event.is_for(who) {
        *received_at = Some(now);
    }
}
