use std::collections::{BTreeMap, HashMap};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{select, unbounded, Receiver, Sender};
use log::{debug, info};
use serde::Serialize;

use super::message::{Addr, Kind, Message, STOP_ABORT};
use super::router::{self, Link, RouterConfig};
use super::worker::{self, Wiring, WorkerJob};
use super::{realize_framework, server, Framework, Topology, Transport};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{LayerKind, LossStats};
use crate::netgraph::{BuildOptions, NetConfig, NeuralNet};
use crate::paramserver::{partition_params, ParamShard, ShardConfig, SliceInfo, UpdaterConfig};
use crate::tensor::Blob;
use crate::training::{evaluate, Algorithm, LocalContext, StepStats};

/// Everything needed to run one training job on the cluster runtime.
#[derive(Debug, Clone)]
pub struct RunSpec {
    /// The net as configured; it is partitioned for `workers_per_group`.
    pub net: NetConfig,
    pub algorithm: Algorithm,
    pub updater: UpdaterConfig,
    pub topology: Topology,
    pub seed: u64,
    /// Effective mini-batch size of each worker group.
    pub batch_size: usize,
    pub iterations: u64,
    pub train: Dataset,
    pub test: Option<Dataset>,
    /// Evaluate the test set every this many group-0 iterations; 0 disables.
    pub test_every: u64,
    pub checkpoint_every: u64,
    /// Final checkpoint location; periodic ones get a `.iter<N>` suffix.
    pub checkpoint_path: Option<PathBuf>,
    /// Parameters installed over the fresh initialization before training.
    pub restore: Option<Checkpoint>,
    /// Fetch every parameter at the start of an iteration instead of on use.
    pub overlap: bool,
    /// Delay added to every routed message.
    pub latency: Duration,
    /// Keep the group-0 parameters after every iteration.
    pub record_trajectory: bool,
}

impl RunSpec {
    pub fn new(net: NetConfig, updater: UpdaterConfig, train: Dataset, batch_size: usize, iterations: u64) -> Self {
        RunSpec {
            net,
            algorithm: Algorithm::Bp,
            updater,
            topology: Topology::default(),
            seed: 0,
            batch_size,
            iterations,
            train,
            test: None,
            test_every: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            restore: None,
            overlap: true,
            latency: Duration::ZERO,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsPhase {
    Train,
    Test,
}

impl MetricsPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricsPhase::Train => "train",
            MetricsPhase::Test => "test",
        }
    }
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub phase: MetricsPhase,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub wall_ms: f64,
}

/// Live traffic counters shared by all units of a job.
#[derive(Debug, Default)]
pub(crate) struct Tally {
    pub sent: AtomicU64,
    pub delivered: AtomicU64,
    pub dropped: AtomicU64,
    pub absorbed: AtomicU64,
    pub frames_out: AtomicU64,
    pub frames_in: AtomicU64,
    pub updates_sent: AtomicU64,
    pub updates_received: AtomicU64,
    pub updates_applied: AtomicU64,
    pub syncs_sent: AtomicU64,
    pub syncs_merged: AtomicU64,
    pub gets_parked: AtomicU64,
}

/// Traffic totals of a finished job.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    /// Messages handed to a stub by units.
    pub messages_sent: u64,
    /// Messages placed in a unit inbox.
    pub messages_delivered: u64,
    pub messages_dropped: u64,
    /// Worker updates folded into another by stub pre-aggregation.
    pub updates_absorbed: u64,
    pub frames_out: u64,
    pub frames_in: u64,
    pub updates_sent: u64,
    pub updates_received: u64,
    pub updates_applied: u64,
    pub syncs_sent: u64,
    pub syncs_merged: u64,
    pub gets_parked: u64,
}

impl Tally {
    fn snapshot(&self) -> Counters {
        let get = |a: &AtomicU64| a.load(Ordering::SeqCst);
        Counters {
            messages_sent: get(&self.sent),
            messages_delivered: get(&self.delivered),
            messages_dropped: get(&self.dropped),
            updates_absorbed: get(&self.absorbed),
            frames_out: get(&self.frames_out),
            frames_in: get(&self.frames_in),
            updates_sent: get(&self.updates_sent),
            updates_received: get(&self.updates_received),
            updates_applied: get(&self.updates_applied),
            syncs_sent: get(&self.syncs_sent),
            syncs_merged: get(&self.syncs_merged),
            gets_parked: get(&self.gets_parked),
        }
    }
}

/// What units tell the driver outside the message fabric.
pub(crate) enum Event {
    Metrics {
        group: usize,
        iteration: u64,
        step: StepStats,
    },
    Finished {
        unit: Addr,
    },
    Failed {
        unit: Addr,
        error: Error,
    },
}

/// Group-0 versions at which servers push their slices to the driver.
#[derive(Debug, Clone, Default)]
pub(crate) struct SnapshotPlan {
    every: Vec<u64>,
}

impl SnapshotPlan {
    pub(crate) fn wants(&self, version: u64) -> bool {
        version > 0 && self.every.iter().any(|&e| e > 0 && version % e == 0)
    }
}

/// Outcome of a finished job.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub framework: Framework,
    /// Final parameters of server group 0, keyed by base name.
    pub params: BTreeMap<String, Blob>,
    /// Final parameters of every server group.
    pub group_params: Vec<BTreeMap<String, Blob>>,
    /// Per server group: parameter values as of the last delta exchange,
    /// including merged neighbor deltas.
    pub group_synced: Vec<BTreeMap<String, Blob>>,
    /// Per server group: delta exchanges sent, summed over slices.
    pub group_syncs_sent: Vec<u64>,
    /// Group-0 parameters after each iteration, when recorded.
    pub trajectory: Vec<(u64, BTreeMap<String, Blob>)>,
    pub metrics: Vec<MetricRow>,
    pub counters: Counters,
    /// Wall time from launch until the last worker finished.
    pub train_ms: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl RunReport {
    pub fn ms_per_iteration(&self, iterations: u64) -> f64 {
        self.train_ms / iterations.max(1) as f64
    }
}

struct Plan {
    whole: NeuralNet,
    test_net: Option<NeuralNet>,
    slices: Vec<SliceInfo>,
    by_param: HashMap<String, Vec<SliceInfo>>,
    bridges: HashMap<u32, (usize, usize)>,
    fragments: Vec<NeuralNet>,
    weights: Vec<HashMap<String, u16>>,
}

fn plan(spec: &RunSpec) -> Result<Plan> {
    spec.topology.validate("cluster")?;
    spec.updater.validate("updater")?;
    if spec.batch_size == 0 {
        return Err(Error::validation("batch_size", "must be at least 1"));
    }
    if spec.train.is_empty() {
        return Err(Error::validation("data", "the training set is empty"));
    }
    let k = spec.topology.workers_per_group;
    let opts = BuildOptions {
        batch: spec.batch_size,
        seed: spec.seed,
    };
    let mut whole = NeuralNet::build(&spec.net.pipeline(k)?, opts)?;
    if let Some(ckpt) = &spec.restore {
        let restored = ckpt.restore(&mut whole)?;
        info!("restored {} parameters from checkpoint", restored.len());
    }
    let fragments: Vec<NeuralNet> = (0..k).map(|u| whole.fragment(u)).collect::<Result<_>>()?;
    if let Some(u) = fragments.iter().position(NeuralNet::is_empty) {
        return Err(Error::config(format!(
            "worker {u} of {k} would get an empty net fragment; the net has fewer partitioned layers than workers_per_group"
        )));
    }
    let test_net = match &spec.test {
        Some(_) => Some(NeuralNet::build(&spec.net.pipeline(1)?, opts)?),
        None => None,
    };

    let sizes: Vec<(String, usize)> = whole.param_specs().map(|s| (s.name.clone(), s.numel())).collect();
    let slices = partition_params(&sizes, spec.topology.servers_per_group);
    let mut by_param: HashMap<String, Vec<SliceInfo>> = sizes.iter().map(|(n, _)| (n.clone(), Vec::new())).collect();
    for s in &slices {
        by_param.get_mut(&s.param).expect("sliced params come from the net").push(s.clone());
    }

    // Replicated parameters are updated by every owner; the lowest
    // location carries the weight of the workers that do not own it.
    let mut weights = vec![HashMap::new(); k];
    for (name, _) in &sizes {
        let owners: Vec<usize> = (0..k).filter(|&u| fragments[u].params().contains(name)).collect();
        for (i, &u) in owners.iter().enumerate() {
            let w = if i == 0 { k - (owners.len() - 1) } else { 1 };
            weights[u].insert(name.clone(), w as u16);
        }
    }

    let mut bridges: HashMap<u32, (usize, usize)> = HashMap::new();
    for l in whole.layers() {
        match l.kind {
            LayerKind::BridgeSrc { id } => bridges.entry(id).or_default().0 = l.location,
            LayerKind::BridgeDst { id } => bridges.entry(id).or_default().1 = l.location,
            _ => {}
        }
    }
    Ok(Plan {
        whole,
        test_net,
        slices,
        by_param,
        bridges,
        fragments,
        weights,
    })
}

fn spawn_named<T: Send + 'static>(name: String, f: impl FnOnce() -> T + Send + 'static) -> Result<JoinHandle<T>> {
    Ok(thread::Builder::new().name(name).spawn(f)?)
}

/// Values of each parameter reassembled from its slices.
fn params_from_slices(plan: &Plan, values: &BTreeMap<u32, Blob>) -> Result<BTreeMap<String, Blob>> {
    let mut out = BTreeMap::new();
    for spec in plan.whole.param_specs() {
        let mut data = Vec::with_capacity(spec.numel());
        for s in &plan.by_param[&spec.name] {
            let v = values
                .get(&s.id)
                .ok_or_else(|| Error::protocol(format!("slice {} of `{}` is missing", s.id, spec.name)))?;
            data.extend_from_slice(v.data());
        }
        out.insert(spec.name.clone(), Blob::from_vec(spec.shape.0, spec.shape.1, data)?);
    }
    Ok(out)
}

/// Joins column pieces of split parameters into values keyed by base name.
fn to_base_names(whole: &mut NeuralNet, params: BTreeMap<String, Blob>) -> Result<BTreeMap<String, Blob>> {
    for (name, value) in params {
        whole.params_mut().get_mut(&name)?.refresh(value, 0)?;
    }
    whole.assembled_values()
}

fn iteration_path(path: &Path, iteration: u64) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".iter{iteration}"));
    PathBuf::from(s)
}

struct Driver<'a> {
    spec: &'a RunSpec,
    plan: Plan,
    start: Instant,
    metrics: Vec<MetricRow>,
    train_rows: BTreeMap<u64, (usize, f64, LossStats)>,
    snapshots: BTreeMap<u64, BTreeMap<u32, Blob>>,
    trajectory: Vec<(u64, BTreeMap<String, Blob>)>,
    checkpoints: Vec<PathBuf>,
    tested: Option<u64>,
}

impl Driver<'_> {
    fn on_metrics(&mut self, group: usize, iteration: u64, step: StepStats) {
        if group != 0 {
            return;
        }
        let k = self.spec.topology.workers_per_group;
        let entry = self.train_rows.entry(iteration).or_insert((0, 0.0, LossStats::default()));
        entry.0 += 1;
        entry.1 += step.loss;
        entry.2.merge(&step.stats);
        if entry.0 < k {
            return;
        }
        let (_, loss_sum, stats) = self.train_rows.remove(&iteration).expect("present");
        let loss = match self.spec.algorithm {
            Algorithm::Cd { .. } => stats.loss_sum / stats.count.max(1) as f64,
            Algorithm::Bp | Algorithm::Bptt => loss_sum,
        };
        self.metrics.push(MetricRow {
            iteration,
            phase: MetricsPhase::Train,
            loss,
            accuracy: stats
                .has_accuracy
                .then(|| stats.correct as f64 / stats.count.max(1) as f64),
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
        });
    }

    fn on_put(&mut self, mut msg: Message) -> Result<()> {
        if msg.kind != Kind::Put {
            return Err(Error::protocol(format!("driver cannot handle {:?} from {:?}", msg.kind, msg.src)));
        }
        let version = msg.version as u64;
        let blob = msg.take_payload()?;
        let entry = self.snapshots.entry(version).or_default();
        entry.insert(msg.id, blob);
        if entry.len() < self.plan.slices.len() {
            return Ok(());
        }
        let values = self.snapshots.remove(&version).expect("present");
        let params = params_from_slices(&self.plan, &values)?;
        let base = to_base_names(&mut self.plan.whole, params)?;
        self.on_snapshot(version, base)
    }

    fn on_snapshot(&mut self, version: u64, base: BTreeMap<String, Blob>) -> Result<()> {
        let spec = self.spec;
        if spec.test_every > 0 && version % spec.test_every == 0 {
            self.test(version, &base)?;
        }
        if let Some(path) = &spec.checkpoint_path {
            if spec.checkpoint_every > 0 && version % spec.checkpoint_every == 0 && version < spec.iterations {
                let p = iteration_path(path, version);
                self.save(&p, version, &base)?;
            }
        }
        if spec.record_trajectory {
            self.trajectory.push((version, base));
        }
        Ok(())
    }

    fn test(&mut self, version: u64, base: &BTreeMap<String, Blob>) -> Result<()> {
        let (Some(net), Some(data)) = (self.plan.test_net.as_mut(), self.spec.test.as_ref()) else {
            return Ok(());
        };
        let ckpt = Checkpoint {
            seed: self.spec.seed,
            iteration: version,
            params: base.clone(),
        };
        ckpt.restore(net)?;
        let m = evaluate(net, &mut LocalContext::new(self.spec.seed), data, self.spec.batch_size)?;
        self.metrics.push(MetricRow {
            iteration: version,
            phase: MetricsPhase::Test,
            loss: m.loss,
            accuracy: m.accuracy,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
        });
        self.tested = Some(version);
        Ok(())
    }

    fn save(&mut self, path: &Path, iteration: u64, base: &BTreeMap<String, Blob>) -> Result<()> {
        Checkpoint {
            seed: self.spec.seed,
            iteration,
            params: base.clone(),
        }
        .save(path)?;
        debug!("checkpoint written to {}", path.display());
        self.checkpoints.push(path.to_path_buf());
        Ok(())
    }
}

struct Fabric {
    worker_links: Link,
    server_links: Link,
    routers: Vec<JoinHandle<()>>,
    inboxes: Vec<(Addr, Sender<Message>)>,
    receivers: HashMap<Addr, Receiver<Message>>,
}

fn connect_pair() -> Result<(TcpStream, TcpStream)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let a = TcpStream::connect(addr)?;
    let (b, _) = listener.accept()?;
    Ok((a, b))
}

fn build_fabric(spec: &RunSpec, tally: &Arc<Tally>, events: &Sender<Event>) -> Result<Fabric> {
    let t = &spec.topology;
    let mut worker_side: Vec<Addr> = vec![Addr::DRIVER];
    for g in 0..t.worker_groups {
        for u in 0..t.workers_per_group {
            worker_side.push(Addr::worker(g, u));
        }
    }
    let mut server_side = Vec::new();
    for sg in 0..t.server_groups {
        for s in 0..t.servers_per_group {
            server_side.push(Addr::server(sg, s));
        }
    }
    let mut inboxes = Vec::new();
    let mut receivers = HashMap::new();
    for &a in worker_side.iter().chain(&server_side) {
        let (tx, rx) = unbounded();
        inboxes.push((a, tx));
        receivers.insert(a, rx);
    }
    let routes = |addrs: &[Addr]| -> HashMap<Addr, Sender<Message>> {
        inboxes
            .iter()
            .filter(|(a, _)| addrs.contains(a))
            .map(|(a, tx)| (*a, tx.clone()))
            .collect()
    };
    let aggregate = t.is_sync().then_some(t.workers_per_group);
    match t.transport {
        Transport::InProcess => {
            let all: Vec<Addr> = worker_side.iter().chain(&server_side).copied().collect();
            let (tx, rx) = unbounded();
            let config = RouterConfig {
                aggregate,
                latency: spec.latency,
            };
            let h = router::spawn("stub", (tx.clone(), rx), routes(&all), None, config, tally.clone(), events.clone())?;
            let link = Link::new(tx, tally.clone());
            Ok(Fabric {
                worker_links: link.clone(),
                server_links: link,
                routers: vec![h],
                inboxes,
                receivers,
            })
        }
        Transport::Socket => {
            let (sa, sb) = connect_pair()?;
            let (tx_a, rx_a) = unbounded();
            let (tx_b, rx_b) = unbounded();
            let config_a = RouterConfig {
                aggregate,
                latency: spec.latency,
            };
            let config_b = RouterConfig {
                aggregate: None,
                latency: spec.latency,
            };
            let ha = router::spawn(
                "stub-a",
                (tx_a.clone(), rx_a),
                routes(&worker_side),
                Some(sa),
                config_a,
                tally.clone(),
                events.clone(),
            )?;
            let hb = router::spawn(
                "stub-b",
                (tx_b.clone(), rx_b),
                routes(&server_side),
                Some(sb),
                config_b,
                tally.clone(),
                events.clone(),
            )?;
            Ok(Fabric {
                worker_links: Link::new(tx_a, tally.clone()),
                server_links: Link::new(tx_b, tally.clone()),
                routers: vec![ha, hb],
                inboxes,
                receivers,
            })
        }
    }
}

/// Runs a job to completion: builds and partitions the net, starts the
/// stub, servers and workers, collects metrics and snapshots, and shuts
/// everything down once every worker finished its iterations.
pub fn launch(spec: &RunSpec) -> Result<RunReport> {
    let plan = plan(spec)?;
    let t = spec.topology.clone();
    let framework = realize_framework(&t);
    info!(
        "launching {:?}: {} worker group(s) of {}, {} server group(s) of {}",
        framework, t.worker_groups, t.workers_per_group, t.server_groups, t.servers_per_group
    );
    let tally = Arc::new(Tally::default());
    let (events_tx, events) = unbounded::<Event>();
    let mut fabric = build_fabric(spec, &tally, &events_tx)?;

    let mut snapshot_every = Vec::new();
    if spec.record_trajectory {
        snapshot_every.push(1);
    }
    if spec.test.is_some() {
        snapshot_every.push(spec.test_every);
    }
    if spec.checkpoint_path.is_some() {
        snapshot_every.push(spec.checkpoint_every);
    }
    let snapshot_plan = SnapshotPlan { every: snapshot_every };

    let mut servers = Vec::new();
    for sg in 0..t.server_groups {
        for s in 0..t.servers_per_group {
            let config = ShardConfig {
                server_group: sg,
                server_id: s,
                worker_groups: t.worker_groups_of(sg),
                workers_per_group: t.workers_per_group,
                updater: spec.updater,
                sync_every: t.sync_every,
                neighbors: t.neighbors_of(sg),
            };
            let initial: Vec<(u32, Blob)> = plan
                .slices
                .iter()
                .filter(|sl| sl.server == s)
                .map(|sl| {
                    let v = plan.whole.params().value(&sl.param)?;
                    Ok((sl.id, Blob::row_vector(v.data()[sl.offset..sl.offset + sl.len].to_vec())))
                })
                .collect::<Result<_>>()?;
            let shard = ParamShard::new(config, initial);
            let me = Addr::server(sg, s);
            let inbox = fabric.receivers.remove(&me).expect("inbox exists");
            let (link, plan_s, tally_s, ev) = (fabric.server_links.clone(), snapshot_plan.clone(), tally.clone(), events_tx.clone());
            let handle = spawn_named(format!("server-{sg}-{s}"), move || {
                let result = server::run(shard, link, inbox, plan_s, tally_s);
                if let Err(e) = &result {
                    if !matches!(e, Error::Stopped) {
                        let _ = ev.send(Event::Failed {
                            unit: me,
                            error: Error::protocol(format!("server {sg}/{s} failed: {e}")),
                        });
                    }
                }
                result
            })?;
            servers.push((sg, handle));
        }
    }

    let wiring = Arc::new(Wiring {
        slices: plan.by_param.clone(),
        bridges: plan.bridges.clone(),
        overlap: spec.overlap,
        warmup: t.warmup,
    });
    let mut workers = Vec::new();
    for g in 0..t.worker_groups {
        let data = if t.worker_groups > 1 {
            spec.train.shard(g, t.worker_groups)?
        } else {
            spec.train.clone()
        };
        for u in 0..t.workers_per_group {
            let me = Addr::worker(g, u);
            let job = WorkerJob {
                group: g,
                unit: u,
                server_group: t.server_group_of(g),
                net: plan.fragments[u].clone(),
                data: data.clone(),
                batch: spec.batch_size,
                iterations: spec.iterations,
                algorithm: spec.algorithm,
                weights: plan.weights[u].clone(),
                seed: spec.seed,
            };
            let inbox = fabric.receivers.remove(&me).expect("inbox exists");
            let (link, wiring, ev, tally_w) = (fabric.worker_links.clone(), wiring.clone(), events_tx.clone(), tally.clone());
            let handle = spawn_named(format!("worker-{g}-{u}"), move || {
                let result = worker::run(job, wiring, link, inbox, ev.clone(), tally_w);
                let event = match result {
                    Ok(()) => Event::Finished { unit: me },
                    Err(error) => Event::Failed { unit: me, error },
                };
                let _ = ev.send(event);
            })?;
            workers.push(handle);
        }
    }
    drop(events_tx);
    let driver_inbox = fabric.receivers.remove(&Addr::DRIVER).expect("driver inbox exists");

    let mut driver = Driver {
        spec,
        plan,
        start: Instant::now(),
        metrics: Vec::new(),
        train_rows: BTreeMap::new(),
        snapshots: BTreeMap::new(),
        trajectory: Vec::new(),
        checkpoints: Vec::new(),
        tested: None,
    };
    let mut running = workers.len();
    let mut failure: Option<Error> = None;
    while running > 0 && failure.is_none() {
        select! {
            recv(events) -> ev => match ev {
                Ok(Event::Metrics { group, iteration, step, .. }) => driver.on_metrics(group, iteration, step),
                Ok(Event::Finished { unit }) => {
                    debug!("{unit:?} finished");
                    running -= 1;
                }
                Ok(Event::Failed { unit, error }) => {
                    debug!("unit {unit:?} failed: {error}");
                    failure = Some(error);
                }
                Err(_) => failure = Some(Error::protocol("all units vanished")),
            },
            recv(driver_inbox) -> msg => {
                if let Ok(msg) = msg {
                    if let Err(e) = driver.on_put(msg) {
                        failure = Some(e);
                    }
                }
            },
        }
    }
    let train_ms = driver.start.elapsed().as_secs_f64() * 1e3;

    if let Some(error) = failure {
        for (addr, tx) in &fabric.inboxes {
            let _ = tx.send(Message::stop(Addr::DRIVER, *addr).with_reserved(STOP_ABORT));
        }
        for w in workers {
            let _ = w.join();
        }
        for (_, s) in servers {
            let _ = s.join();
        }
        fabric.worker_links.stop_stub();
        fabric.server_links.stop_stub();
        for r in fabric.routers {
            let _ = r.join();
        }
        return Err(error);
    }

    for w in workers {
        w.join().map_err(|_| Error::protocol("a worker thread panicked"))?;
    }
    for sg in 0..t.server_groups {
        for s in 0..t.servers_per_group {
            fabric.worker_links.send(Message::stop(Addr::DRIVER, Addr::server(sg, s)))?;
        }
    }
    let mut shards: Vec<BTreeMap<u32, crate::paramserver::SliceState>> = vec![BTreeMap::new(); t.server_groups];
    let mut server_error = None;
    for (sg, handle) in servers {
        match handle.join() {
            Ok(Ok(shard)) => shards[sg].extend(shard.into_slices()),
            Ok(Err(e)) => server_error = server_error.or(Some(e)),
            Err(_) => server_error = server_error.or(Some(Error::protocol("a server thread panicked"))),
        }
    }
    fabric.worker_links.stop_stub();
    fabric.server_links.stop_stub();
    for r in fabric.routers {
        let _ = r.join();
    }
    if let Some(e) = server_error {
        return Err(e);
    }
    while let Ok(ev) = events.try_recv() {
        if let Event::Failed { error, .. } = ev {
            return Err(error);
        }
    }
    while let Ok(msg) = driver_inbox.try_recv() {
        driver.on_put(msg)?;
    }

    let mut group_params = Vec::new();
    let mut group_synced = Vec::new();
    let mut group_syncs_sent = Vec::new();
    for slices in &shards {
        let values: BTreeMap<u32, Blob> = slices.iter().map(|(id, s)| (*id, s.value.clone())).collect();
        let synced: BTreeMap<u32, Blob> = slices.iter().map(|(id, s)| (*id, s.last_synced.clone())).collect();
        let p = params_from_slices(&driver.plan, &values)?;
        group_params.push(to_base_names(&mut driver.plan.whole, p)?);
        let p = params_from_slices(&driver.plan, &synced)?;
        group_synced.push(to_base_names(&mut driver.plan.whole, p)?);
        group_syncs_sent.push(slices.values().map(|s| s.syncs_sent).sum());
    }
    let params = group_params[0].clone();
    if spec.test.is_some() && spec.test_every > 0 && driver.tested != Some(spec.iterations) {
        driver.test(spec.iterations, &params)?;
    }
    if let Some(path) = &spec.checkpoint_path {
        driver.save(path, spec.iterations, &params)?;
    }
    Ok(RunReport {
        framework,
        params,
        group_params,
        group_synced,
        group_syncs_sent,
        trajectory: driver.trajectory,
        metrics: driver.metrics,
        counters: tally.snapshot(),
        train_ms,
        checkpoints: driver.checkpoints,
    })
}
