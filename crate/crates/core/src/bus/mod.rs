//! Topic-based publish/subscribe bus with a lockstep tick barrier.
//!
//! Every node publishes its tick-`k` state, then arrives at the barrier for
//! tick `k`. When all expected nodes have arrived the broker releases the
//! tick-`k` envelopes to their subscribers, in canonical order, together with
//! the grant for tick `k + 1`. Data therefore always reaches consumers
//! exactly one tick after it was produced, whichever transport is used.
//!
//! Two transports share the same [`Broker`]: direct in-process calls and
//! newline-delimited JSON over TCP. A WebSocket bridge mirrors the bus for
//! browser clients.

mod broker;
pub mod tcp;
pub mod ws;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use broker::{Broker, BrokerConfig};

pub mod topics {
    pub const VEHICLE_STATE: &str = "vehicle.state";
    pub const PEDESTRIAN_STATE: &str = "pedestrian.state";
    pub const PEDESTRIAN_POSE: &str = "pedestrian.pose";
    pub const SIGNAL_STATE: &str = "signal.state";
    pub const WARNING_EVENT: &str = "warning.event";
    pub const AEB_EVENT: &str = "aeb.event";
    pub const CONTROL_VEHICLE: &str = "control.vehicle";
    pub const CONTROL_PEDESTRIAN: &str = "control.pedestrian";
    /// Scenario of the run, published once at tick 0 by the harness.
    pub const RUN_SCENARIO: &str = "run.scenario";

    pub const ALL: [&str; 9] = [
        VEHICLE_STATE,
        PEDESTRIAN_STATE,
        PEDESTRIAN_POSE,
        SIGNAL_STATE,
        WARNING_EVENT,
        AEB_EVENT,
        CONTROL_VEHICLE,
        CONTROL_PEDESTRIAN,
        RUN_SCENARIO,
    ];

    /// Topics an unregistered client (the console) may publish on.
    pub fn is_control(topic: &str) -> bool {
        topic == CONTROL_VEHICLE || topic == CONTROL_PEDESTRIAN
    }

    /// Reserved prefix for transport-level control lines.
    pub const CONTROL_PREFIX: &str = "$bus.";
}

/// Unit of exchange on the bus and on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: String,
    pub tick: u64,
    pub seq: u64,
    pub sender: String,
    pub payload: Value,
}

impl Envelope {
    pub fn new(topic: impl Into<String>, tick: u64, seq: u64, sender: impl Into<String>, payload: Value) -> Self {
        Envelope {
            topic: topic.into(),
            tick,
            seq,
            sender: sender.into(),
            payload,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, BusError> {
        serde_json::from_str(line).map_err(|e| BusError::Protocol {
            message: format!("bad envelope: {e}"),
        })
    }

    /// Decodes the payload into a typed message.
    pub fn decode<T: serde::de::DeserializeOwned>(&self) -> Result<T, BusError> {
        T::deserialize(&self.payload).map_err(|e| BusError::Protocol {
            message: format!("bad {} payload from {}: {e}", self.topic, self.sender),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BusError {
    #[error("node {node:?} is not registered on the bus")]
    UnknownNode { node: String },
    #[error("node {node:?} sent tick {tick} but the barrier is at {barrier} (desynchronized)")]
    StaleTick { node: String, tick: u64, barrier: u64 },
    #[error("node {node:?} sent tick {tick} ahead of the barrier at {barrier}")]
    FutureTick { node: String, tick: u64, barrier: u64 },
    #[error("barrier timeout at tick {tick}: still waiting for {}", .missing.join(", "))]
    BarrierTimeout { tick: u64, missing: Vec<String> },
    #[error("desync: node {node:?} {reason}")]
    Desync { node: String, reason: String },
    #[error("the run has finished")]
    RunFinished,
    #[error("role {role:?} is already claimed")]
    RoleConflict { role: String },
    #[error("protocol error: {message}")]
    Protocol { message: String },
    #[error("transport I/O error: {message}")]
    Io { message: String },
}

impl From<std::io::Error> for BusError {
    fn from(e: std::io::Error) -> Self {
        BusError::Io {
            message: e.to_string(),
        }
    }
}

/// Permission to compute `tick`, plus everything published during the
/// previous tick on the node's subscribed topics.
#[derive(Debug, Clone, PartialEq)]
pub struct Grant {
    pub tick: u64,
    /// Set on the final grant of a run; nodes exit instead of computing `tick`.
    pub stop: bool,
    pub envelopes: Vec<Envelope>,
}

/// A node's connection to the bus. One transport per node, used from one
/// thread.
pub trait Transport: Send {
    fn node(&self) -> &str;
    fn subscribe(&mut self, topic: &str) -> Result<(), BusError>;
    fn publish(&mut self, topic: &str, tick: u64, payload: Value) -> Result<u64, BusError>;
    /// Blocks at the barrier for `tick`. `request_stop` ends the run after
    /// this tick's data is released.
    fn arrive(&mut self, tick: u64, request_stop: bool) -> Result<Grant, BusError>;
}

/// Direct calls into a shared broker.
pub struct InProcessTransport {
    broker: Arc<Broker>,
    node: String,
}

impl InProcessTransport {
    pub fn connect(broker: Arc<Broker>, node: impl Into<String>) -> Result<Self, BusError> {
        let node = node.into();
        broker.connect(&node)?;
        Ok(InProcessTransport { broker, node })
    }
}

impl fmt::Debug for InProcessTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InProcessTransport").field("node", &self.node).finish()
    }
}

impl Transport for InProcessTransport {
    fn node(&self) -> &str {
        &self.node
    }

    fn subscribe(&mut self, topic: &str) -> Result<(), BusError> {
        self.broker.subscribe(&self.node, topic)
    }

    fn publish(&mut self, topic: &str, tick: u64, payload: Value) -> Result<u64, BusError> {
        self.broker.publish(&self.node, topic, tick, payload)
    }

    fn arrive(&mut self, tick: u64, request_stop: bool) -> Result<Grant, BusError> {
        self.broker.arrive(&self.node, tick, request_stop)
    }
}

impl Drop for InProcessTransport {
    fn drop(&mut self) {
        self.broker.disconnect(&self.node);
    }
}
