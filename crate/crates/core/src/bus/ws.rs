//! WebSocket mirror of the bus for the browser console.
//!
//! Frames are the same JSON envelopes as the TCP wire. A client opens with
//! `$bus.hello` whose payload may claim a role (`{"role": "vehicle"}` or
//! `{"role": "pedestrian"}`); each role can be held by one client at a time.
//! After `$bus.welcome` the client receives every released envelope and may
//! publish on the control topic of its role. A control frame stamped with a
//! tick older than the barrier is answered with a `stale_tick` error carrying
//! the current tick so the client can resend.

use std::collections::BTreeSet;
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use super::topics::{self, CONTROL_PEDESTRIAN, CONTROL_VEHICLE};
use super::{Broker, BusError, Envelope};

const POLL: Duration = Duration::from_millis(5);

pub struct WsBridge {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

type Claims = Arc<Mutex<BTreeSet<String>>>;

impl WsBridge {
    pub fn bind(addr: impl ToSocketAddrs, broker: Arc<Broker>) -> io::Result<WsBridge> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let stop = shutdown.clone();
        let claims: Claims = Arc::default();
        let accept = thread::Builder::new().name("ws-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (broker, claims, stop) = (broker.clone(), claims.clone(), stop.clone());
                let _ = thread::Builder::new()
                    .name("ws-conn".into())
                    .spawn(move || session(stream, broker, claims, stop));
            }
        })?;
        Ok(WsBridge {
            addr,
            shutdown,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for WsBridge {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn control_topic(role: &str) -> Option<&'static str> {
    match role {
        "vehicle" => Some(CONTROL_VEHICLE),
        "pedestrian" => Some(CONTROL_PEDESTRIAN),
        _ => None,
    }
}

fn frame(topic: &str, tick: u64, payload: Value) -> Message {
    Message::Text(Envelope::new(topic, tick, 0, "$bus", payload).to_line())
}

fn error_frame(tick: u64, err: &BusError) -> Message {
    frame("$bus.error", tick, json!(err))
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

/// Role claim that is released when the session ends.
struct Claim {
    claims: Claims,
    role: Option<String>,
}

impl Drop for Claim {
    fn drop(&mut self) {
        if let Some(role) = &self.role {
            self.claims.lock().unwrap_or_else(|p| p.into_inner()).remove(role);
        }
    }
}

fn session(stream: TcpStream, broker: Arc<Broker>, claims: Claims, shutdown: Arc<AtomicBool>) {
    let _ = stream.set_nodelay(true);
    let Ok(mut ws) = tungstenite::accept(stream) else { return };

    let hello = match ws.read() {
        Ok(Message::Text(text)) => Envelope::from_line(&text),
        _ => return,
    };
    let hello = match hello {
        Ok(h) if h.topic == "$bus.hello" => h,
        Ok(_) | Err(_) => {
            let err = BusError::Protocol {
                message: "expected $bus.hello".into(),
            };
            let _ = ws.send(error_frame(broker.tick(), &err));
            return;
        }
    };
    let role = hello.payload["role"].as_str().map(str::to_owned);
    if let Some(r) = &role {
        if control_topic(r).is_none() {
            let err = BusError::Protocol {
                message: format!("unknown role {r:?}"),
            };
            let _ = ws.send(error_frame(broker.tick(), &err));
            return;
        }
    }
    let _claim = {
        let mut held = claims.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(r) = &role {
            if !held.insert(r.clone()) {
                drop(held);
                let _ = ws.send(error_frame(broker.tick(), &BusError::RoleConflict { role: r.clone() }));
                let _ = ws.close(None);
                let _ = ws.flush();
                return;
            }
        }
        Claim {
            claims: claims.clone(),
            role: role.clone(),
        }
    };
    let sender = format!("console-{}", role.as_deref().unwrap_or("viewer"));
    let observed = broker.observe();
    let tick = broker.tick();
    if ws
        .send(frame("$bus.welcome", tick, json!({ "tick": tick, "role": role })))
        .is_err()
    {
        return;
    }
    let _ = ws.get_ref().set_read_timeout(Some(POLL));

    loop {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = handle_control(&broker, role.as_deref(), &sender, &text);
                if ws.send(reply).is_err() {
                    break;
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(_) => break,
        }
        if !forward(&mut ws, &observed, &broker) {
            break;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
}

/// Pushes released envelopes to the client. Returns false when the session
/// should end.
fn forward(ws: &mut WebSocket<TcpStream>, observed: &Receiver<Envelope>, broker: &Broker) -> bool {
    // Read before draining: a finished broker has already queued its last batch.
    let done = broker.is_finished() || broker.failure().is_some();
    loop {
        match observed.try_recv() {
            Ok(env) => {
                if ws.send(Message::Text(env.to_line())).is_err() {
                    return false;
                }
            }
            Err(TryRecvError::Empty) => return !done,
            Err(TryRecvError::Disconnected) => return false,
        }
    }
}

fn handle_control(broker: &Broker, role: Option<&str>, sender: &str, text: &str) -> Message {
    let tick = broker.tick();
    let env = match Envelope::from_line(text) {
        Ok(env) => env,
        Err(e) => return error_frame(tick, &e),
    };
    let allowed = role.and_then(control_topic);
    if !topics::is_control(&env.topic) || allowed != Some(env.topic.as_str()) {
        let err = BusError::Protocol {
            message: format!("{sender} may not publish on {}", env.topic),
        };
        return error_frame(tick, &err);
    }
    if env.tick < tick {
        let err = BusError::StaleTick {
            node: sender.to_owned(),
            tick: env.tick,
            barrier: tick,
        };
        return error_frame(tick, &err);
    }
    match broker.publish_external(sender, &env.topic, env.payload) {
        Ok((tick, seq)) => frame("$bus.ack", tick, json!({ "tick": tick, "seq": seq })),
        Err(e) => error_frame(tick, &e),
    }
}
