use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use twinloop_core::bus::tcp::{BusServer, TcpTransport};
use twinloop_core::harness::{
    read_envelope_log, replay, run_experiment_with, run_node, write_outputs, NodeHost, Role, RunOptions, RunOutput,
    ThreadHost,
};
use twinloop_core::{Broker, Experiment, HarnessError, Scenario};

#[derive(Parser)]
#[command(name = "twinloop", version, about = "Vehicle-pedestrian co-simulation over a lockstep bus")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write metrics, traces and the envelope log.
    Run(RunArgs),
    /// Rebuild metrics and traces from a recorded envelope log.
    Replay(ReplayArgs),
    /// Run a single node against a bus server (spawned by `run --processes`).
    #[command(hide = true)]
    Node(NodeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON; the built-in default scene when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// hdv, av or cv; overrides the scenario's experiment.
    #[arg(long)]
    experiment: Option<Experiment>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run each node in its own process, connected over TCP.
    #[arg(long)]
    processes: bool,
    /// Seed for per-node timing jitter. Outputs are identical for any seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Pace the run in wall-clock time, e.g. 50 for real time at dt = 0.02.
    #[arg(long)]
    ticks_per_second: Option<f64>,
    /// Serve the console WebSocket bridge on this port.
    #[arg(long)]
    ws_port: Option<u16>,
    /// Barrier timeout in milliseconds.
    #[arg(long)]
    barrier_timeout_ms: Option<u64>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    log: PathBuf,
    /// Also write metrics and traces here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NodeArgs {
    #[arg(long)]
    role: Role,
    #[arg(long)]
    connect: SocketAddr,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Replay(args) => cmd_replay(args),
        Cmd::Node(args) => cmd_node(args),
    }
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    match path {
        Some(p) => Scenario::load(p).with_context(|| format!("loading scenario {}", p.display())),
        None => Ok(Scenario::default()),
    }
}

fn print_summary(out: &RunOutput) {
    let m = &out.metrics;
    let fmt = |v: Option<f64>, unit: &str| v.map_or("-".to_string(), |x| format!("{x:.3} {unit}"));
    println!(
        "{}: braking point {}, v2p distance {}, avg decel {}, max decel {}, outcome {}",
        m.experiment,
        fmt(m.braking_point, "m"),
        fmt(m.v2p_distance, "m"),
        fmt(m.avg_deceleration, "m/s^2"),
        fmt(m.max_deceleration, "m/s^2"),
        m.outcome
            .map_or("unfinished".to_string(), |o| format!("{o:?}").to_lowercase()),
    );
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut scenario = load_scenario(args.scenario.as_deref())?;
    if let Some(e) = args.experiment {
        scenario.experiment = e;
    }
    let options = RunOptions {
        seed: args.seed,
        ticks_per_second: args.ticks_per_second,
        barrier_timeout: args.barrier_timeout_ms.map(Duration::from_millis),
        ws_addr: args
            .ws_port
            .map(|p| SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::LOCALHOST, p))),
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let output = if args.processes {
        let scenario_path = args.out.join("scenario.json");
        std::fs::write(&scenario_path, scenario.to_json_pretty())
            .with_context(|| format!("writing {}", scenario_path.display()))?;
        let mut host = ProcessHost::new(scenario_path)?;
        run_experiment_with(&scenario, &options, &mut host)
    } else {
        run_experiment_with(&scenario, &options, &mut ThreadHost::default())
    }
    .with_context(|| format!("running {}", scenario.experiment))?;

    write_outputs(&args.out, &output)?;
    print_summary(&output);
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let envelopes = read_envelope_log(&args.log)?;
    let output = replay(&envelopes)?;
    if let Some(dir) = &args.out {
        write_outputs(dir, &output)?;
    }
    println!("{}", serde_json::to_string_pretty(&output.metrics)?);
    Ok(())
}

fn cmd_node(args: NodeArgs) -> Result<()> {
    let scenario = Scenario::load(&args.scenario)?;
    let mut transport = TcpTransport::connect(args.connect, args.role.node_name())
        .with_context(|| format!("connecting {} to {}", args.role, args.connect))?;
    run_node(args.role, &scenario, &mut transport, args.seed)
        .with_context(|| format!("{} node", args.role))
}

/// One child process per node, all connected to a bus server in this process.
struct ProcessHost {
    scenario_path: PathBuf,
    exe: PathBuf,
    server: Option<BusServer>,
    children: Vec<(Role, Child)>,
}

impl ProcessHost {
    fn new(scenario_path: PathBuf) -> Result<Self> {
        Ok(ProcessHost {
            scenario_path,
            exe: std::env::current_exe().context("locating the twinloop executable")?,
            server: None,
            children: Vec::new(),
        })
    }
}

fn spawn_failed(role: Role, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Node {
        role: role.to_string(),
        message: e.to_string(),
    }
}

impl NodeHost for ProcessHost {
    fn start(&mut self, broker: &Arc<Broker>, _scenario: &Scenario, options: &RunOptions) -> Result<(), HarnessError> {
        let server = BusServer::bind("127.0.0.1:0", broker.clone()).map_err(|source| HarnessError::Io {
            path: "127.0.0.1:0".into(),
            source,
        })?;
        let addr = server.local_addr();
        self.server = Some(server);
        for role in Role::ALL {
            let mut cmd = Command::new(&self.exe);
            cmd.arg("node")
                .arg("--role")
                .arg(role.node_name())
                .arg("--connect")
                .arg(addr.to_string())
                .arg("--scenario")
                .arg(&self.scenario_path);
            if let Some(seed) = options.seed {
                cmd.arg("--seed").arg(seed.to_string());
            }
            let child = cmd.spawn().map_err(|e| spawn_failed(role, e))?;
            self.children.push((role, child));
        }
        Ok(())
    }

    fn join(&mut self) -> Result<(), HarnessError> {
        let mut first = Ok(());
        for (role, mut child) in self.children.drain(..) {
            let r = match child.wait() {
                Ok(status) if status.success() => Ok(()),
                Ok(status) => Err(spawn_failed(role, format!("process exited with {status}"))),
                Err(e) => Err(spawn_failed(role, e)),
            };
            if first.is_ok() {
                first = r;
            }
        }
        self.server = None;
        first
    }
}

impl Drop for ProcessHost {
    fn drop(&mut self) {
        for (_, child) in &mut self.children {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["twinloop", "run", "--experiment", "av", "--seed", "3"]).unwrap();
        match cli.command {
            Cmd::Run(a) => {
                assert_eq!(a.experiment, Some(Experiment::AvPed));
                assert_eq!(a.seed, Some(3));
                assert!(!a.processes);
            }
            _ => panic!("expected run"),
        }
        assert!(Cli::try_parse_from(["twinloop", "run", "--experiment", "bus"]).is_err());
    }
}
