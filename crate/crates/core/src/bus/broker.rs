use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde_json::Value;

use super::{BusError, Envelope, Grant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrokerConfig {
    /// Wall-clock limit on waiting at the barrier.
    pub barrier_timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            barrier_timeout: Duration::from_secs(5),
        }
    }
}

/// The single ordering point of the bus.
#[derive(Debug)]
pub struct Broker {
    state: Mutex<State>,
    released: Condvar,
    config: BrokerConfig,
}

#[derive(Debug, Default)]
struct State {
    tick: u64,
    expected: BTreeSet<String>,
    connected: BTreeSet<String>,
    departed: BTreeSet<String>,
    arrived: BTreeSet<String>,
    subscriptions: BTreeMap<String, BTreeSet<String>>,
    pending: Vec<Envelope>,
    next_seq: HashMap<(String, String), u64>,
    mailboxes: BTreeMap<String, Vec<Envelope>>,
    stop_requested: bool,
    finished: bool,
    failure: Option<BusError>,
    observers: Vec<Sender<Envelope>>,
}

impl State {
    fn check_live(&self) -> Result<(), BusError> {
        if let Some(err) = &self.failure {
            return Err(err.clone());
        }
        if self.finished {
            return Err(BusError::RunFinished);
        }
        Ok(())
    }

    fn check_node(&self, node: &str) -> Result<(), BusError> {
        if self.connected.contains(node) {
            Ok(())
        } else {
            Err(BusError::UnknownNode { node: node.into() })
        }
    }

    fn check_tick(&self, node: &str, tick: u64) -> Result<(), BusError> {
        use std::cmp::Ordering::*;
        match tick.cmp(&self.tick) {
            Equal => Ok(()),
            Less => Err(BusError::StaleTick {
                node: node.into(),
                tick,
                barrier: self.tick,
            }),
            Greater => Err(BusError::FutureTick {
                node: node.into(),
                tick,
                barrier: self.tick,
            }),
        }
    }

    fn enqueue(&mut self, sender: &str, topic: &str, payload: Value) -> u64 {
        let counter = self
            .next_seq
            .entry((topic.to_owned(), sender.to_owned()))
            .or_insert(0);
        let seq = *counter;
        *counter += 1;
        self.pending
            .push(Envelope::new(topic, self.tick, seq, sender, payload));
        seq
    }

    /// Closes the current tick: hands its envelopes to subscribers and
    /// observers in canonical order and opens the next tick.
    fn release(&mut self) {
        let mut batch = std::mem::take(&mut self.pending);
        batch.sort_by(|a, b| {
            (a.topic.as_str(), a.sender.as_str(), a.seq).cmp(&(b.topic.as_str(), b.sender.as_str(), b.seq))
        });
        for (node, topics) in &self.subscriptions {
            let inbox = self.mailboxes.entry(node.clone()).or_default();
            inbox.extend(batch.iter().filter(|e| topics.contains(&e.topic)).cloned());
        }
        self.observers
            .retain(|tx| batch.iter().all(|e| tx.send(e.clone()).is_ok()));
        self.arrived.clear();
        self.tick += 1;
        if self.stop_requested {
            self.finished = true;
        }
    }
}

impl Broker {
    pub fn new<I, S>(expected: I, config: BrokerConfig) -> Arc<Broker>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Arc::new(Broker {
            state: Mutex::new(State {
                expected: expected.into_iter().map(Into::into).collect(),
                ..State::default()
            }),
            released: Condvar::new(),
            config,
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    fn fail(&self, st: &mut State, err: BusError) -> BusError {
        if st.failure.is_none() {
            st.failure = Some(err);
        }
        self.released.notify_all();
        st.failure.clone().expect("failure just set")
    }

    pub fn config(&self) -> BrokerConfig {
        self.config
    }

    /// Current barrier tick.
    pub fn tick(&self) -> u64 {
        self.lock().tick
    }

    pub fn is_finished(&self) -> bool {
        self.lock().finished
    }

    pub fn failure(&self) -> Option<BusError> {
        self.lock().failure.clone()
    }

    pub fn expected_nodes(&self) -> Vec<String> {
        self.lock().expected.iter().cloned().collect()
    }

    /// Registers one of the expected nodes. A second connection under the
    /// same name, including a reconnect after a drop, aborts the run.
    pub fn connect(&self, node: &str) -> Result<(), BusError> {
        let mut st = self.lock();
        st.check_live()?;
        if !st.expected.contains(node) {
            return Err(BusError::UnknownNode { node: node.into() });
        }
        if st.connected.contains(node) || st.departed.contains(node) {
            let err = BusError::Desync {
                node: node.into(),
                reason: "reconnected mid-run".into(),
            };
            return Err(self.fail(&mut st, err));
        }
        st.connected.insert(node.to_owned());
        Ok(())
    }

    /// Called when a node's connection goes away. Before the run has
    /// finished this aborts it.
    pub fn disconnect(&self, node: &str) {
        let mut st = self.lock();
        if !st.connected.remove(node) {
            return;
        }
        st.departed.insert(node.to_owned());
        if !st.finished {
            self.fail(
                &mut st,
                BusError::Desync {
                    node: node.into(),
                    reason: "disconnected mid-run".into(),
                },
            );
        }
    }

    /// Stops the run from outside, e.g. when a supervised node process dies.
    pub fn abort(&self, err: BusError) -> BusError {
        let mut st = self.lock();
        self.fail(&mut st, err)
    }

    pub fn subscribe(&self, node: &str, topic: &str) -> Result<(), BusError> {
        let mut st = self.lock();
        st.check_live()?;
        st.check_node(node)?;
        st.subscriptions
            .entry(node.to_owned())
            .or_default()
            .insert(topic.to_owned());
        Ok(())
    }

    pub fn publish(&self, node: &str, topic: &str, tick: u64, payload: Value) -> Result<u64, BusError> {
        let mut st = self.lock();
        st.check_live()?;
        st.check_node(node)?;
        st.check_tick(node, tick)?;
        if st.arrived.contains(node) {
            return Err(BusError::Protocol {
                message: format!("{node} published after arriving at tick {tick}"),
            });
        }
        Ok(st.enqueue(node, topic, payload))
    }

    /// Publishes from a client outside the barrier (the console). The
    /// envelope is stamped with the current tick. Returns `(tick, seq)`.
    pub fn publish_external(&self, sender: &str, topic: &str, payload: Value) -> Result<(u64, u64), BusError> {
        let mut st = self.lock();
        st.check_live()?;
        if st.expected.contains(sender) {
            return Err(BusError::Protocol {
                message: format!("{sender} is a barrier node"),
            });
        }
        let seq = st.enqueue(sender, topic, payload);
        Ok((st.tick, seq))
    }

    /// Receives a copy of every released envelope, in release order.
    /// Observers never hold up the barrier.
    pub fn observe(&self) -> Receiver<Envelope> {
        let (tx, rx) = mpsc::channel();
        self.lock().observers.push(tx);
        rx
    }

    pub fn arrive(&self, node: &str, tick: u64, request_stop: bool) -> Result<Grant, BusError> {
        let mut st = self.lock();
        st.check_live()?;
        st.check_node(node)?;
        st.check_tick(node, tick)?;
        if !st.arrived.insert(node.to_owned()) {
            return Err(BusError::Protocol {
                message: format!("{node} arrived twice at tick {tick}"),
            });
        }
        st.stop_requested |= request_stop;

        if st.arrived == st.expected {
            st.release();
            self.released.notify_all();
        } else {
            let deadline = Instant::now() + self.config.barrier_timeout;
            loop {
                let now = Instant::now();
                if now >= deadline {
                    let missing = st.expected.difference(&st.arrived).cloned().collect();
                    return Err(self.fail(&mut st, BusError::BarrierTimeout { tick, missing }));
                }
                st = self
                    .released
                    .wait_timeout(st, deadline - now)
                    .unwrap_or_else(|p| p.into_inner())
                    .0;
                if let Some(err) = &st.failure {
                    return Err(err.clone());
                }
                if st.tick > tick {
                    break;
                }
            }
        }
        let envelopes = st.mailboxes.remove(node).unwrap_or_default();
        Ok(Grant {
            tick: tick + 1,
            stop: st.finished,
            envelopes,
        })
    }
}
