//! Runs an experiment end to end: starts the nodes, records every released
//! envelope, assembles the trace and derives the metrics.

mod metrics;
mod nodes;
mod trace;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::json;
use thiserror::Error;

pub use metrics::{compute_metrics, ExperimentMetrics};
pub use nodes::{run_node, Jitter, PedestrianControl, Role, VehicleControl, MAX_THROTTLE};
pub use trace::{emit_traces, Outcome, RunTrace, TraceBuilder, TraceEvent, TraceRecord, WorldState};

use crate::bus::tcp::{BusServer, TcpTransport};
use crate::bus::ws::WsBridge;
use crate::bus::{topics, Broker, BrokerConfig, BusError, Envelope, InProcessTransport, Transport};
use crate::scenario::{Scenario, ScenarioError};
use crate::world::KinematicsError;

/// Bus name of the recorder, which also owns the stop decision.
pub const RECORDER: &str = "harness";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{role} node failed: {message}")]
    Node { role: String, message: String },
    #[error("trace: {0}")]
    Trace(String),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Node names registered on the bus for a run.
pub fn bus_nodes() -> Vec<&'static str> {
    Role::ALL
        .iter()
        .map(|r| r.node_name())
        .chain([RECORDER])
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Seeds per-node timing jitter; outputs must not depend on it.
    pub seed: Option<u64>,
    /// Paces the run in wall-clock time; unpaced runs go as fast as possible.
    pub ticks_per_second: Option<f64>,
    pub barrier_timeout: Option<Duration>,
    /// Serves the console WebSocket bridge on this address for the run.
    pub ws_addr: Option<SocketAddr>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: RunTrace,
    pub metrics: ExperimentMetrics,
    /// Every released envelope, in release order.
    pub envelopes: Vec<Envelope>,
}

/// Starts the four simulation nodes for a run and waits for them.
pub trait NodeHost {
    fn start(&mut self, broker: &Arc<Broker>, scenario: &Scenario, options: &RunOptions) -> Result<(), HarnessError>;
    /// Waits for every node; reports the first node failure.
    fn join(&mut self) -> Result<(), HarnessError>;
}

type NodeHandle = JoinHandle<Result<(), HarnessError>>;

fn join_all(handles: &mut Vec<(Role, NodeHandle)>) -> Result<(), HarnessError> {
    let mut first = Ok(());
    for (role, h) in handles.drain(..) {
        let r = h.join().unwrap_or_else(|_| {
            Err(HarnessError::Node {
                role: role.to_string(),
                message: "thread panicked".into(),
            })
        });
        if first.is_ok() {
            first = r;
        }
    }
    first
}

fn spawn_node(
    role: Role,
    scenario: &Scenario,
    seed: Option<u64>,
    transport: impl Transport + 'static,
) -> Result<NodeHandle, HarnessError> {
    let scenario = scenario.clone();
    thread::Builder::new()
        .name(format!("node-{role}"))
        .spawn(move || {
            let mut transport = transport;
            run_node(role, &scenario, &mut transport, seed)
        })
        .map_err(|source| HarnessError::Io {
            path: PathBuf::from(format!("<thread node-{role}>")),
            source,
        })
}

/// Nodes on threads, talking to the broker directly.
#[derive(Debug, Default)]
pub struct ThreadHost {
    handles: Vec<(Role, NodeHandle)>,
}

impl NodeHost for ThreadHost {
    fn start(&mut self, broker: &Arc<Broker>, scenario: &Scenario, options: &RunOptions) -> Result<(), HarnessError> {
        for role in Role::ALL {
            let t = InProcessTransport::connect(broker.clone(), role.node_name())?;
            self.handles.push((role, spawn_node(role, scenario, options.seed, t)?));
        }
        Ok(())
    }

    fn join(&mut self) -> Result<(), HarnessError> {
        join_all(&mut self.handles)
    }
}

/// Nodes on threads, each connected to the broker through its own TCP socket.
#[derive(Default)]
pub struct SocketHost {
    server: Option<BusServer>,
    handles: Vec<(Role, NodeHandle)>,
}

impl NodeHost for SocketHost {
    fn start(&mut self, broker: &Arc<Broker>, scenario: &Scenario, options: &RunOptions) -> Result<(), HarnessError> {
        let server = BusServer::bind("127.0.0.1:0", broker.clone()).map_err(|source| HarnessError::Io {
            path: PathBuf::from("127.0.0.1:0"),
            source,
        })?;
        for role in Role::ALL {
            let t = TcpTransport::connect(server.local_addr(), role.node_name())?;
            self.handles.push((role, spawn_node(role, scenario, options.seed, t)?));
        }
        self.server = Some(server);
        Ok(())
    }

    fn join(&mut self) -> Result<(), HarnessError> {
        let r = join_all(&mut self.handles);
        self.server = None;
        r
    }
}

/// Runs the experiment in `scenario` with all nodes on in-process threads.
pub fn run_experiment(scenario: &Scenario) -> Result<RunOutput, HarnessError> {
    run_experiment_with(scenario, &RunOptions::default(), &mut ThreadHost::default())
}

pub fn run_experiment_with(
    scenario: &Scenario,
    options: &RunOptions,
    host: &mut dyn NodeHost,
) -> Result<RunOutput, HarnessError> {
    let mut scenario = scenario.clone();
    scenario.normalize()?;
    let mut config = BrokerConfig::default();
    if let Some(t) = options.barrier_timeout {
        config.barrier_timeout = t;
    }
    let broker = Broker::new(bus_nodes(), config);
    let _ws = match options.ws_addr {
        Some(addr) => Some(WsBridge::bind(addr, broker.clone()).map_err(|source| HarnessError::Io {
            path: PathBuf::from(addr.to_string()),
            source,
        })?),
        None => None,
    };
    let recorder = InProcessTransport::connect(broker.clone(), RECORDER)?;
    if let Err(e) = host.start(&broker, &scenario, options) {
        broker.abort(BusError::Desync {
            node: RECORDER.into(),
            reason: format!("node startup failed: {e}"),
        });
        let _ = host.join();
        return Err(e);
    }
    let recorded = record(recorder, &scenario, options);
    let joined = host.join();
    match (recorded, joined) {
        (Ok(out), Ok(())) => Ok(out),
        // A node's own error explains a bus abort better than the abort does.
        (Err(HarnessError::Bus(_)), Err(node_err)) if !matches!(node_err, HarnessError::Bus(_)) => Err(node_err),
        (Err(e), _) | (Ok(_), Err(e)) => Err(e),
    }
}

fn record(mut bus: InProcessTransport, scenario: &Scenario, options: &RunOptions) -> Result<RunOutput, HarnessError> {
    for topic in topics::ALL {
        bus.subscribe(topic)?;
    }
    bus.publish(topics::RUN_SCENARIO, 0, json!(scenario))?;
    let pace = options
        .ticks_per_second
        .filter(|r| *r > 0.0 && r.is_finite())
        .map(|r| Duration::from_secs_f64(1.0 / r));
    let started = Instant::now();

    let mut builder = TraceBuilder::new();
    let mut envelopes = Vec::new();
    let mut tick = 0;
    let mut stop = false;
    loop {
        let grant = bus.arrive(tick, stop)?;
        builder.ingest_tick(tick, &grant.envelopes)?;
        envelopes.extend(grant.envelopes);
        if grant.stop {
            break;
        }
        tick = grant.tick;
        stop = builder.is_done();
        if let Some(p) = pace {
            let due = started + p.mul_f64(tick as f64);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        }
    }
    drop(bus);
    let trace = builder.finish()?;
    let metrics = compute_metrics(&trace, scenario.braking_onset_threshold);
    Ok(RunOutput {
        trace,
        metrics,
        envelopes,
    })
}

/// Rebuilds trace and metrics from a recorded envelope stream.
pub fn replay(envelopes: &[Envelope]) -> Result<RunOutput, HarnessError> {
    let mut builder = TraceBuilder::new();
    let mut start = 0;
    while start < envelopes.len() {
        let tick = envelopes[start].tick;
        let len = envelopes[start..].iter().take_while(|e| e.tick == tick).count();
        builder.ingest_tick(tick, &envelopes[start..start + len])?;
        start += len;
    }
    let threshold = builder
        .scenario()
        .map(|s| s.braking_onset_threshold)
        .ok_or_else(|| HarnessError::Trace("no run.scenario in the recording".into()))?;
    let trace = builder.finish()?;
    let metrics = compute_metrics(&trace, threshold);
    Ok(RunOutput {
        trace,
        metrics,
        envelopes: envelopes.to_vec(),
    })
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_envelope_log(path: &Path) -> Result<Vec<Envelope>, HarnessError> {
    let file = std::fs::File::open(path).map_err(io_at(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let env = Envelope::from_line(&line)
            .map_err(|e| HarnessError::Trace(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(env);
    }
    Ok(out)
}

pub const METRICS_FILE: &str = "metrics.json";
pub const SPEED_TIME_FILE: &str = "speed_time.csv";
pub const SPACE_TIME_FILE: &str = "space_time.csv";
pub const ENVELOPE_LOG_FILE: &str = "envelopes.log";

/// Writes metrics, both trace CSVs and the envelope log into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut text = serde_json::to_string_pretty(&out.metrics).expect("metrics serialize");
    text.push('\n');
    std::fs::write(&metrics_path, text).map_err(io_at(&metrics_path))?;
    emit_traces(&out.trace, &dir.join(SPEED_TIME_FILE), &dir.join(SPACE_TIME_FILE))?;

    let log_path = dir.join(ENVELOPE_LOG_FILE);
    let file = std::fs::File::create(&log_path).map_err(io_at(&log_path))?;
    let mut w = BufWriter::new(file);
    out.envelopes
        .iter()
        .try_for_each(|e| writeln!(w, "{}", e.to_line()))
        .and_then(|_| w.flush())
        .map_err(io_at(&log_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Experiment;

    #[test]
    fn every_experiment_finishes() {
        for exp in Experiment::ALL {
            let out = run_experiment(&Scenario::default().with_experiment(exp)).unwrap();
            assert_eq!(out.trace.outcome, Some(Outcome::Completed), "{exp}");
            assert!(!out.metrics.collision, "{exp}");
            for (k, r) in out.trace.records.iter().enumerate() {
                assert_eq!(r.tick, k as u64);
            }
        }
    }

    #[test]
    fn replay_matches_live_run() {
        let live = run_experiment(&Scenario::default()).unwrap();
        let again = replay(&live.envelopes).unwrap();
        assert_eq!(again.trace, live.trace);
        assert_eq!(again.metrics, live.metrics);
    }

    #[test]
    fn replay_without_scenario_fails() {
        assert!(matches!(replay(&[]), Err(HarnessError::Trace(_))));
    }

    #[test]
    fn outputs_land_in_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&Scenario::default()).unwrap();
        write_outputs(dir.path(), &out).unwrap();
        let log = read_envelope_log(&dir.path().join(ENVELOPE_LOG_FILE)).unwrap();
        assert_eq!(log, out.envelopes);
        let m: ExperimentMetrics =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
        assert_eq!(m, out.metrics);
    }
}
