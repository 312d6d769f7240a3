//! Newline-delimited JSON envelopes over TCP.
//!
//! Every line in either direction is an [`Envelope`]. Ordinary topics are
//! publishes; topics under `$bus.` carry the session protocol:
//!
//! | client → server   | payload          | server reply                                   |
//! |-------------------|------------------|------------------------------------------------|
//! | `$bus.hello`      | –                | `$bus.welcome {tick}`                          |
//! | `$bus.subscribe`  | `{topic}`        | `$bus.ok`                                      |
//! | `<topic>`         | message          | `$bus.ack {seq}`                               |
//! | `$bus.arrive`     | `{stop}`         | released envelopes, then `$bus.grant {tick, stop, count}` |
//!
//! Any request may instead be answered by `$bus.error` whose payload is a
//! serialized [`BusError`].

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde_json::{json, Value};

use super::{Broker, BusError, Envelope, Grant, Transport};

const HELLO: &str = "$bus.hello";
const WELCOME: &str = "$bus.welcome";
const SUBSCRIBE: &str = "$bus.subscribe";
const OK: &str = "$bus.ok";
const ACK: &str = "$bus.ack";
const ARRIVE: &str = "$bus.arrive";
const GRANT: &str = "$bus.grant";
const ERROR: &str = "$bus.error";
const SERVER: &str = "$bus";

fn control(topic: &str, tick: u64, payload: Value) -> Envelope {
    Envelope::new(topic, tick, 0, SERVER, payload)
}

fn write_line(w: &mut impl Write, env: &Envelope) -> io::Result<()> {
    w.write_all(env.to_line().as_bytes())?;
    w.write_all(b"\n")
}

fn read_envelope(r: &mut impl BufRead, buf: &mut String) -> Result<Option<Envelope>, BusError> {
    buf.clear();
    if r.read_line(buf)? == 0 {
        return Ok(None);
    }
    Envelope::from_line(buf.trim_end()).map(Some)
}

/// Accepts node connections and forwards them to a [`Broker`].
pub struct BusServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl BusServer {
    pub fn bind(addr: impl ToSocketAddrs, broker: Arc<Broker>) -> io::Result<BusServer> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let stop = shutdown.clone();
        let accept = thread::Builder::new()
            .name("bus-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let broker = broker.clone();
                    let _ = thread::Builder::new()
                        .name("bus-conn".into())
                        .spawn(move || serve(stream, broker));
                }
            })?;
        Ok(BusServer {
            addr,
            shutdown,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for BusServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, broker: Arc<Broker>) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    let mut buf = String::new();

    let node = match read_envelope(&mut reader, &mut buf) {
        Ok(Some(hello)) if hello.topic == HELLO => hello.sender,
        _ => return,
    };
    let reply = match broker.connect(&node) {
        Ok(()) => control(WELCOME, broker.tick(), json!({ "tick": broker.tick() })),
        Err(e) => control(ERROR, broker.tick(), json!(e)),
    };
    let registered = reply.topic == WELCOME;
    if write_line(&mut writer, &reply).and_then(|_| writer.flush()).is_err() || !registered {
        return;
    }

    loop {
        let req = match read_envelope(&mut reader, &mut buf) {
            Ok(Some(req)) => req,
            _ => break,
        };
        let written = match handle(&broker, &node, req) {
            Ok(lines) => lines.iter().try_for_each(|l| write_line(&mut writer, l)),
            Err(e) => write_line(&mut writer, &control(ERROR, broker.tick(), json!(e))),
        };
        if written.and_then(|_| writer.flush()).is_err() {
            break;
        }
    }
    broker.disconnect(&node);
    let _ = writer.get_ref().shutdown(Shutdown::Both);
}

fn handle(broker: &Broker, node: &str, req: Envelope) -> Result<Vec<Envelope>, BusError> {
    match req.topic.as_str() {
        SUBSCRIBE => {
            let topic = req.payload["topic"].as_str().ok_or_else(|| BusError::Protocol {
                message: "subscribe needs a topic".into(),
            })?;
            broker.subscribe(node, topic)?;
            Ok(vec![control(OK, req.tick, Value::Null)])
        }
        ARRIVE => {
            let stop = req.payload["stop"].as_bool().unwrap_or(false);
            let grant = broker.arrive(node, req.tick, stop)?;
            let count = grant.envelopes.len();
            let mut out = grant.envelopes;
            out.push(control(
                GRANT,
                grant.tick,
                json!({ "tick": grant.tick, "stop": grant.stop, "count": count }),
            ));
            Ok(out)
        }
        t if t.starts_with(super::topics::CONTROL_PREFIX) => Err(BusError::Protocol {
            message: format!("unexpected control line {t}"),
        }),
        topic => {
            let seq = broker.publish(node, topic, req.tick, req.payload)?;
            Ok(vec![control(ACK, req.tick, json!({ "seq": seq }))])
        }
    }
}

/// Client side of the TCP transport.
pub struct TcpTransport {
    node: String,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    buf: String,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs, node: impl Into<String>) -> Result<Self, BusError> {
        let node = node.into();
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut t = TcpTransport {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            node,
            buf: String::new(),
        };
        t.request(control(HELLO, 0, Value::Null))?;
        t.expect(WELCOME)?;
        Ok(t)
    }

    fn request(&mut self, mut env: Envelope) -> Result<(), BusError> {
        env.sender.clone_from(&self.node);
        write_line(&mut self.writer, &env)?;
        self.writer.flush()?;
        Ok(())
    }

    fn next(&mut self) -> Result<Envelope, BusError> {
        let env = read_envelope(&mut self.reader, &mut self.buf)?.ok_or_else(|| BusError::Io {
            message: "bus server closed the connection".into(),
        })?;
        if env.topic == ERROR {
            return Err(env.decode::<BusError>()?);
        }
        Ok(env)
    }

    fn expect(&mut self, topic: &str) -> Result<Envelope, BusError> {
        let env = self.next()?;
        if env.topic != topic {
            return Err(BusError::Protocol {
                message: format!("expected {topic}, got {}", env.topic),
            });
        }
        Ok(env)
    }
}

impl Transport for TcpTransport {
    fn node(&self) -> &str {
        &self.node
    }

    fn subscribe(&mut self, topic: &str) -> Result<(), BusError> {
        self.request(control(SUBSCRIBE, 0, json!({ "topic": topic })))?;
        self.expect(OK).map(drop)
    }

    fn publish(&mut self, topic: &str, tick: u64, payload: Value) -> Result<u64, BusError> {
        self.request(Envelope::new(topic, tick, 0, "", payload))?;
        let ack = self.expect(ACK)?;
        ack.payload["seq"].as_u64().ok_or_else(|| BusError::Protocol {
            message: "ack without seq".into(),
        })
    }

    fn arrive(&mut self, tick: u64, request_stop: bool) -> Result<Grant, BusError> {
        self.request(control(ARRIVE, tick, json!({ "stop": request_stop })))?;
        let mut envelopes = Vec::new();
        loop {
            let env = self.next()?;
            if env.topic == GRANT {
                return Ok(Grant {
                    tick: env.payload["tick"].as_u64().unwrap_or(tick + 1),
                    stop: env.payload["stop"].as_bool().unwrap_or(false),
                    envelopes,
                });
            }
            envelopes.push(env);
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        let _ = self.writer.flush();
        let _ = self.writer.get_ref().shutdown(Shutdown::Both);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::BrokerConfig;
    use std::time::Duration;

    #[test]
    fn publish_and_grant_over_socket() {
        let broker = Broker::new(["n"], BrokerConfig::default());
        let server = BusServer::bind("127.0.0.1:0", broker.clone()).unwrap();
        let mut t = TcpTransport::connect(server.local_addr(), "n").unwrap();
        t.subscribe("topic.a").unwrap();
        for k in 0..3 {
            assert_eq!(t.publish("topic.a", k, json!({"k": k})).unwrap(), k);
            let g = t.arrive(k, k == 2).unwrap();
            assert_eq!(g.tick, k + 1);
            assert_eq!(g.envelopes.len(), 1);
            assert_eq!(g.envelopes[0].payload["k"], k);
            assert_eq!(g.envelopes[0].sender, "n");
            assert_eq!(g.stop, k == 2);
        }
    }

    #[test]
    fn errors_cross_the_wire() {
        let broker = Broker::new(["n"], BrokerConfig::default());
        let server = BusServer::bind("127.0.0.1:0", broker.clone()).unwrap();
        assert_eq!(
            TcpTransport::connect(server.local_addr(), "stranger").err(),
            Some(BusError::UnknownNode {
                node: "stranger".into()
            })
        );
        let mut t = TcpTransport::connect(server.local_addr(), "n").unwrap();
        assert!(matches!(
            t.publish("x", 4, Value::Null),
            Err(BusError::FutureTick { tick: 4, .. })
        ));
    }

    #[test]
    fn dropped_connection_aborts_run() {
        let broker = Broker::new(["a", "b"], BrokerConfig::default());
        let server = BusServer::bind("127.0.0.1:0", broker.clone()).unwrap();
        let a = TcpTransport::connect(server.local_addr(), "a").unwrap();
        let _b = TcpTransport::connect(server.local_addr(), "b").unwrap();
        drop(a);
        for _ in 0..200 {
            if broker.failure().is_some() {
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        assert!(matches!(broker.failure(), Some(BusError::Desync { .. })));
    }
}
