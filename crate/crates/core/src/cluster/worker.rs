use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::Ordering;
use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};

use super::launch::{Event, Tally};
use super::message::{Addr, Kind, Message, BACKWARD_BIT, GET_TOTAL};
use super::router::Link;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Flow, LayerEnv, Param};
use crate::netgraph::NeuralNet;
use crate::paramserver::SliceInfo;
use crate::rng::{UniformSource, UnitRng};
use crate::tensor::Blob;
use crate::training::{train_one_batch, Algorithm, ExecContext};

/// Wiring shared by every worker of a job.
pub(crate) struct Wiring {
    /// Slices of each parameter in offset order.
    pub slices: HashMap<String, Vec<SliceInfo>>,
    /// Bridge id → (sending location, receiving location).
    pub bridges: HashMap<u32, (usize, usize)>,
    pub overlap: bool,
    /// Iterations group 0 runs alone before the other groups start.
    pub warmup: u64,
}

pub(crate) struct WorkerJob {
    pub group: usize,
    pub unit: usize,
    pub server_group: usize,
    pub net: NeuralNet,
    pub data: Dataset,
    pub batch: usize,
    pub iterations: u64,
    pub algorithm: Algorithm,
    /// Contribution weight of this worker's update for each parameter it owns.
    pub weights: HashMap<String, u16>,
    pub seed: u64,
}

struct WorkerCtx {
    me: Addr,
    server_group: usize,
    link: Link,
    inbox: Receiver<Message>,
    wiring: Arc<Wiring>,
    weights: HashMap<String, u16>,
    tally: Arc<Tally>,
    rng: UnitRng,
    requested: HashSet<u32>,
    responses: HashMap<u32, (Blob, u32)>,
    data: HashMap<u32, VecDeque<Blob>>,
}

impl WorkerCtx {
    fn slices(&self, param: &str) -> Result<&[SliceInfo]> {
        self.wiring
            .slices
            .get(param)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Routing(format!("parameter `{param}` has no slices")))
    }

    fn request(&mut self, param: &str, iteration: u64) -> Result<()> {
        // The first iteration of a late group waits for the warm-up updates.
        let (min, mode) = if self.wiring.warmup > 0 && self.me.group != 0 && iteration == 0 {
            (self.wiring.warmup, GET_TOTAL)
        } else {
            (iteration, 0)
        };
        let targets: Vec<(u32, usize)> = self.slices(param)?.iter().map(|s| (s.id, s.server)).collect();
        for (id, server) in targets {
            let dst = Addr::server(self.server_group, server);
            self.link
                .send(Message::new(Kind::Get, self.me, dst, id, min as u32).with_reserved(mode))?;
            self.requested.insert(id);
        }
        Ok(())
    }

    /// Blocks for one message and files it.
    fn pump(&mut self) -> Result<()> {
        let mut msg = self.inbox.recv().map_err(|_| Error::Stopped)?;
        match msg.kind {
            Kind::Response => {
                let blob = msg.take_payload()?;
                self.responses.insert(msg.id, (blob, msg.version));
            }
            Kind::Data => {
                let blob = msg.take_payload()?;
                self.data.entry(msg.id).or_default().push_back(blob);
            }
            Kind::Stop => return Err(Error::Stopped),
            other => {
                return Err(Error::protocol(format!("worker {:?} cannot handle {other:?} from {:?}", self.me, msg.src)))
            }
        }
        Ok(())
    }
}

impl LayerEnv for WorkerCtx {
    fn bridge_send(&mut self, id: u32, flow: Flow, blob: Blob) -> Result<()> {
        let &(from, to) = self
            .wiring
            .bridges
            .get(&id)
            .ok_or_else(|| Error::Routing(format!("unknown bridge {id}")))?;
        let (peer, wire_id) = match flow {
            Flow::Forward => (to, id),
            Flow::Backward => (from, id | BACKWARD_BIT),
        };
        let dst = Addr::worker(self.me.group as usize, peer);
        self.link.send(Message::new(Kind::Data, self.me, dst, wire_id, 0).with_payload(blob))
    }

    fn bridge_recv(&mut self, id: u32, flow: Flow) -> Result<Blob> {
        let wire_id = match flow {
            Flow::Forward => id,
            Flow::Backward => id | BACKWARD_BIT,
        };
        loop {
            if let Some(blob) = self.data.get_mut(&wire_id).and_then(VecDeque::pop_front) {
                return Ok(blob);
            }
            self.pump()?;
        }
    }

    fn rng(&mut self) -> &mut dyn UniformSource {
        &mut self.rng
    }
}

impl ExecContext for WorkerCtx {
    fn prefetch(&mut self, params: &[&Param], iteration: u64) -> Result<()> {
        if self.wiring.overlap {
            for p in params {
                self.request(p.name(), iteration)?;
            }
        }
        Ok(())
    }

    fn collect(&mut self, param: &Param, iteration: u64) -> Result<Option<(Blob, u64)>> {
        let ids: Vec<u32> = self.slices(param.name())?.iter().map(|s| s.id).collect();
        if ids.is_empty() {
            return Ok(None);
        }
        if !ids.iter().all(|id| self.requested.contains(id)) {
            if self.wiring.overlap {
                return Err(Error::protocol(format!(
                    "collect of `{}` that was never requested",
                    param.name()
                )));
            }
            self.request(param.name(), iteration)?;
        }
        while !ids.iter().all(|id| self.responses.contains_key(id)) {
            self.pump()?;
        }
        let mut values = Vec::with_capacity(param.value().len());
        let mut version = u64::MAX;
        for id in &ids {
            let (blob, v) = self.responses.remove(id).expect("checked above");
            self.requested.remove(id);
            values.extend_from_slice(blob.data());
            version = version.min(v as u64);
        }
        let (rows, cols) = param.value().shape();
        Ok(Some((Blob::from_vec(rows, cols, values)?, version)))
    }

    fn update(&mut self, param: &Param, iteration: u64) -> Result<()> {
        let weight = *self
            .weights
            .get(param.name())
            .ok_or_else(|| Error::protocol(format!("worker {:?} does not own `{}`", self.me, param.name())))?;
        let grad = param.grad().data();
        let pieces: Vec<(u32, usize, Blob)> = self
            .slices(param.name())?
            .iter()
            .map(|s| (s.id, s.server, Blob::row_vector(grad[s.offset..s.offset + s.len].to_vec())))
            .collect();
        for (id, server, piece) in pieces {
            let dst = Addr::server(self.server_group, server);
            let msg = Message::new(Kind::Update, self.me, dst, id, iteration as u32)
                .with_reserved(weight)
                .with_payload(piece);
            self.link.send(msg)?;
            self.tally.updates_sent.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }
}

/// Runs TrainOneBatch for every iteration, reporting per-iteration stats.
pub(crate) fn run(
    job: WorkerJob,
    wiring: Arc<Wiring>,
    link: Link,
    inbox: Receiver<Message>,
    events: Sender<Event>,
    tally: Arc<Tally>,
) -> Result<()> {
    let WorkerJob {
        group,
        unit,
        server_group,
        mut net,
        data,
        batch,
        iterations,
        algorithm,
        weights,
        seed,
    } = job;
    let mut ctx = WorkerCtx {
        me: Addr::worker(group, unit),
        server_group,
        link,
        inbox,
        wiring,
        weights,
        tally,
        rng: UnitRng::derived(seed, &format!("worker/{group}/{unit}")),
        requested: HashSet::new(),
        responses: HashMap::new(),
        data: HashMap::new(),
    };
    for t in 0..iterations {
        let start = (t as usize).wrapping_mul(batch) % data.len().max(1);
        net.set_batch(data.batch(start, batch));
        let step = train_one_batch(&mut net, &mut ctx, algorithm, t)?;
        let _ = events.send(Event::Metrics {
            group,
            iteration: t,
            step,
        });
    }
    Ok(())
}
