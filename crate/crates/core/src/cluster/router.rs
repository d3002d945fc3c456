//! The per-host stub: routes messages between units, pre-aggregates
//! same-slice updates of co-located workers in synchronous mode, forwards
//! traffic for remote units over a socket, and optionally delays local
//! deliveries to emulate transport latency.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::{debug, warn};

use super::launch::{Event, Tally};
use super::message::{read_frame, write_frame, Addr, Kind, Message, Role};
use crate::error::{Error, Result};
use crate::tensor::Blob;

/// A unit's handle for sending through its host's stub.
#[derive(Clone)]
pub(crate) struct Link {
    tx: Sender<Message>,
    tally: Arc<Tally>,
}

impl Link {
    pub(crate) fn new(tx: Sender<Message>, tally: Arc<Tally>) -> Self {
        Link { tx, tally }
    }

    pub(crate) fn send(&self, msg: Message) -> Result<()> {
        self.tally.sent.fetch_add(1, Ordering::Relaxed);
        self.tx.send(msg).map_err(|_| Error::Stopped)
    }

    /// Asks the stub itself to drain and exit. Not counted as traffic.
    pub(crate) fn stop_stub(&self) {
        let _ = self.tx.send(Message::stop(Addr::DRIVER, Addr::STUB));
    }
}

pub(crate) struct RouterConfig {
    /// Contributions per worker group, when same-slice updates of local
    /// workers are to be summed before forwarding.
    pub aggregate: Option<usize>,
    pub latency: Duration,
}

type Routes = HashMap<Addr, Sender<Message>>;
type AggKey = (Addr, u32, u16, u32);

struct Router {
    inbox: Receiver<Message>,
    local: Arc<Routes>,
    remote: Option<BufWriter<TcpStream>>,
    reader: Option<JoinHandle<()>>,
    config: RouterConfig,
    tally: Arc<Tally>,
    events: Sender<Event>,
    pending: BTreeMap<AggKey, BTreeMap<u16, (Blob, u16)>>,
    delay: Option<(Sender<(Instant, Message)>, JoinHandle<()>)>,
}

fn deliver(routes: &Routes, tally: &Tally, msg: Message) {
    match routes.get(&msg.dst) {
        Some(tx) => {
            let dst = msg.dst;
            if tx.send(msg).is_ok() {
                tally.delivered.fetch_add(1, Ordering::Relaxed);
            } else {
                tally.dropped.fetch_add(1, Ordering::Relaxed);
                debug!("inbox of {dst:?} is closed; message dropped");
            }
        }
        None => {
            tally.dropped.fetch_add(1, Ordering::Relaxed);
            warn!("no local route to {:?}", msg.dst);
        }
    }
}

/// Starts a stub thread serving `local` units. When `socket` is given,
/// messages for units not in `local` are written to it and frames read
/// from it are routed like local traffic.
pub(crate) fn spawn(
    name: &str,
    inbox: (Sender<Message>, Receiver<Message>),
    local: Routes,
    socket: Option<TcpStream>,
    config: RouterConfig,
    tally: Arc<Tally>,
    events: Sender<Event>,
) -> Result<JoinHandle<()>> {
    let (self_tx, rx) = inbox;
    let (remote, reader) = match socket {
        None => (None, None),
        Some(stream) => {
            stream.set_nodelay(true)?;
            let read_half = stream.try_clone()?;
            let tally_r = tally.clone();
            let events_r = events.clone();
            let reader = thread::Builder::new().name(format!("{name}-reader")).spawn(move || {
                let mut r = BufReader::new(read_half);
                loop {
                    match read_frame(&mut r) {
                        Ok(Some(msg)) => {
                            tally_r.frames_in.fetch_add(1, Ordering::Relaxed);
                            if self_tx.send(msg).is_err() {
                                break;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            let _ = events_r.send(Event::Failed {
                                unit: Addr::STUB,
                                error: e,
                            });
                            break;
                        }
                    }
                }
            })?;
            (Some(BufWriter::new(stream)), Some(reader))
        }
    };
    let local = Arc::new(local);
    let delay = if config.latency > Duration::ZERO {
        let (tx, drx) = unbounded::<(Instant, Message)>();
        let routes = local.clone();
        let tally_d = tally.clone();
        let handle = thread::Builder::new().name(format!("{name}-delay")).spawn(move || {
            for (due, msg) in drx {
                let now = Instant::now();
                if due > now {
                    thread::sleep(due - now);
                }
                deliver(&routes, &tally_d, msg);
            }
        })?;
        Some((tx, handle))
    } else {
        None
    };
    let router = Router {
        inbox: rx,
        local,
        remote,
        reader,
        config,
        tally,
        events,
        pending: BTreeMap::new(),
        delay,
    };
    Ok(thread::Builder::new().name(name.to_string()).spawn(move || router.run())?)
}

impl Router {
    fn run(mut self) {
        while let Ok(msg) = self.inbox.recv() {
            if msg.dst == Addr::STUB {
                break;
            }
            self.handle(msg);
            // Flush once the queue is drained, batching small frames.
            if self.inbox.is_empty() {
                self.flush();
            }
        }
        self.shutdown();
    }

    fn flush(&mut self) {
        if let Some(w) = &mut self.remote {
            if let Err(e) = w.flush() {
                self.fail(e.into());
            }
        }
    }

    fn fail(&self, error: Error) {
        let _ = self.events.send(Event::Failed { unit: Addr::STUB, error });
    }

    fn handle(&mut self, msg: Message) {
        let aggregatable =
            msg.kind == Kind::Update && msg.src.role == Role::Worker && self.local.contains_key(&msg.src);
        match self.config.aggregate {
            Some(need) if aggregatable => {
                if let Err(e) = self.aggregate(msg, need) {
                    self.fail(e);
                }
            }
            _ => self.forward(msg),
        }
    }

    /// Buffers a worker's update and forwards the sum, in ascending unit
    /// order, once every worker of the group has contributed.
    fn aggregate(&mut self, mut msg: Message, need: usize) -> Result<()> {
        let key = (msg.dst, msg.id, msg.src.group, msg.version);
        let grad = msg.take_payload()?;
        let entry = self.pending.entry(key).or_default();
        if entry.insert(msg.src.unit, (grad, msg.reserved.max(1))).is_some() {
            return Err(Error::protocol(format!(
                "duplicate update for slice {} from {:?} at iteration {}",
                msg.id, msg.src, msg.version
            )));
        }
        let have: usize = entry.values().map(|(_, w)| *w as usize).sum();
        if have < need {
            return Ok(());
        }
        let parts = self.pending.remove(&key).expect("entry exists");
        if have > need {
            return Err(Error::protocol(format!("slice {} aggregated {have} contributions, expected {need}", msg.id)));
        }
        let count = parts.len() as u64;
        let first = *parts.keys().next().expect("nonempty");
        let mut total: Option<Blob> = None;
        for (_, (g, _)) in parts {
            match &mut total {
                None => total = Some(g),
                Some(t) => t.add_assign(&g)?,
            }
        }
        self.tally.absorbed.fetch_add(count - 1, Ordering::Relaxed);
        msg.src.unit = first;
        msg.reserved = need as u16;
        msg.payload = total;
        self.forward(msg);
        Ok(())
    }

    fn forward(&mut self, msg: Message) {
        if self.local.contains_key(&msg.dst) {
            match &self.delay {
                Some((tx, _)) => {
                    let due = Instant::now() + self.config.latency;
                    if tx.send((due, msg)).is_err() {
                        self.tally.dropped.fetch_add(1, Ordering::Relaxed);
                    }
                }
                None => deliver(&self.local, &self.tally, msg),
            }
            return;
        }
        let Some(w) = &mut self.remote else {
            self.tally.dropped.fetch_add(1, Ordering::Relaxed);
            self.fail(Error::Routing(format!("no route to {:?}", msg.dst)));
            return;
        };
        match write_frame(w, &msg) {
            Ok(()) => {
                self.tally.frames_out.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => {
                self.tally.dropped.fetch_add(1, Ordering::Relaxed);
                self.fail(e.into());
            }
        }
    }

    /// Drains queued traffic, closes the outgoing stream, waits for the
    /// peer to close its side, then delivers whatever arrived meanwhile.
    fn shutdown(mut self) {
        while let Ok(msg) = self.inbox.try_recv() {
            if msg.dst != Addr::STUB {
                self.handle(msg);
            }
        }
        if let Some(mut w) = self.remote.take() {
            let _ = w.flush();
            if let Ok(stream) = w.into_inner() {
                let _ = stream.shutdown(Shutdown::Write);
            }
        }
        if let Some(reader) = self.reader.take() {
            let _ = reader.join();
        }
        while let Ok(msg) = self.inbox.try_recv() {
            if msg.dst != Addr::STUB {
                self.handle(msg);
            }
        }
        if !self.pending.is_empty() {
            warn!("{} partial update aggregates discarded at shutdown", self.pending.len());
        }
        if let Some((tx, handle)) = self.delay.take() {
            drop(tx);
            let _ = handle.join();
        }
    }
}
