//! TrainOneBatch algorithms (BP, CD-k, BPTT), evaluation and the local
//! execution context used when a net runs without a cluster.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Flow, LayerEnv, LossStats, Param, Phase};
use crate::netgraph::{NeuralNet, TraceEvent};
use crate::paramserver::{UpdaterConfig, UpdaterState};
use crate::rng::{UniformSource, UnitRng};
use crate::tensor::Blob;

/// The per-iteration procedure a worker runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Algorithm {
    Bp,
    /// Contrastive divergence with `k` Gibbs steps.
    Cd { k: usize },
    Bptt,
}

/// Parameter exchange plus bridge transport, as seen by a worker.
pub trait ExecContext: LayerEnv {
    /// Announces, bottom layer first, the parameters this iteration will
    /// collect so their fetches can be started early.
    fn prefetch(&mut self, _params: &[&Param], _iteration: u64) -> Result<()> {
        Ok(())
    }

    /// Returns the freshest value of `param` for `iteration`, blocking if
    /// needed, or `None` when the worker's own copy is authoritative.
    fn collect(&mut self, param: &Param, iteration: u64) -> Result<Option<(Blob, u64)>>;

    /// Emits the accumulated gradient of `param` without waiting.
    fn update(&mut self, param: &Param, iteration: u64) -> Result<()>;
}

/// Runs a net inside one thread: bridges loop back through local queues
/// and, when an updater is configured, parameters are updated in place.
pub struct LocalContext {
    rng: Box<dyn UniformSource>,
    queues: HashMap<(u32, Flow), VecDeque<Blob>>,
    updater: Option<UpdaterConfig>,
    store: BTreeMap<String, (Blob, u64, UpdaterState)>,
    pub collects: usize,
    pub updates: usize,
}

impl LocalContext {
    pub fn new(seed: u64) -> Self {
        LocalContext::with_rng(Box::new(UnitRng::derived(seed, "worker/0/0")))
    }

    pub fn with_rng(rng: Box<dyn UniformSource>) -> Self {
        LocalContext {
            rng,
            queues: HashMap::new(),
            updater: None,
            store: BTreeMap::new(),
            collects: 0,
            updates: 0,
        }
    }

    pub fn with_updater(mut self, updater: UpdaterConfig) -> Self {
        self.updater = Some(updater);
        self
    }

    /// Current values held by the local updater.
    pub fn values(&self) -> BTreeMap<String, Blob> {
        self.store.iter().map(|(k, v)| (k.clone(), v.0.clone())).collect()
    }
}

impl LayerEnv for LocalContext {
    fn bridge_send(&mut self, id: u32, flow: Flow, blob: Blob) -> Result<()> {
        self.queues.entry((id, flow)).or_default().push_back(blob);
        Ok(())
    }

    fn bridge_recv(&mut self, id: u32, flow: Flow) -> Result<Blob> {
        self.queues
            .get_mut(&(id, flow))
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::protocol(format!("bridge {id} has nothing to receive ({flow:?})")))
    }

    fn rng(&mut self) -> &mut dyn UniformSource {
        self.rng.as_mut()
    }
}

impl ExecContext for LocalContext {
    fn collect(&mut self, param: &Param, _iteration: u64) -> Result<Option<(Blob, u64)>> {
        self.collects += 1;
        if self.updater.is_none() {
            return Ok(None);
        }
        let entry = self
            .store
            .entry(param.name().to_string())
            .or_insert_with(|| (param.value().clone(), param.version(), UpdaterState::default()));
        Ok(Some((entry.0.clone(), entry.1)))
    }

    fn update(&mut self, param: &Param, _iteration: u64) -> Result<()> {
        self.updates += 1;
        let Some(updater) = self.updater else {
            return Ok(());
        };
        let entry = self
            .store
            .entry(param.name().to_string())
            .or_insert_with(|| (param.value().clone(), param.version(), UpdaterState::default()));
        updater.apply(entry.0.data_mut(), &mut entry.2, param.grad().data(), entry.1)?;
        entry.1 += 1;
        Ok(())
    }
}

/// Loss and statistics of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Sum of the normalized loss-layer outputs; for CD the mean
    /// reconstruction cross-entropy of this worker's rows.
    pub loss: f64,
    pub stats: LossStats,
}

fn diverged(iteration: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged {
            iteration,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn collect_layer(net: &mut NeuralNet, ctx: &mut dyn ExecContext, pos: usize, iteration: u64) -> Result<()> {
    for name in net.owned_params(pos).to_vec() {
        if net.tracing() {
            let layer = net.layers()[pos].name.clone();
            net.record(TraceEvent::Collect { layer, param: name.clone() });
        }
        if let Some((value, version)) = ctx.collect(net.params().get(&name)?, iteration)? {
            net.params_mut().get_mut(&name)?.refresh(value, version)?;
        }
    }
    Ok(())
}

fn update_layer(net: &mut NeuralNet, ctx: &mut dyn ExecContext, pos: usize, iteration: u64) -> Result<()> {
    for name in net.owned_params(pos).to_vec() {
        if net.tracing() {
            let layer = net.layers()[pos].name.clone();
            net.record(TraceEvent::Update { layer, param: name.clone() });
        }
        ctx.update(net.params().get(&name)?, iteration)?;
    }
    Ok(())
}

fn forward_pass(net: &mut NeuralNet, ctx: &mut dyn ExecContext, iteration: u64) -> Result<()> {
    net.begin_pass();
    {
        let owned: Vec<String> = (0..net.len()).flat_map(|p| net.owned_params(p).to_vec()).collect();
        let params: Vec<&Param> = owned.iter().map(|n| net.params().get(n)).collect::<Result<_>>()?;
        ctx.prefetch(&params, iteration)?;
    }
    for pos in 0..net.len() {
        collect_layer(net, ctx, pos, iteration)?;
        net.forward_layer(pos, Phase::Train, ctx)?;
    }
    Ok(())
}

fn backward_pass(net: &mut NeuralNet, ctx: &mut dyn ExecContext, iteration: u64) -> Result<()> {
    for pos in (0..net.len()).rev() {
        net.backward_layer(pos, ctx)?;
        update_layer(net, ctx, pos, iteration)?;
    }
    Ok(())
}

/// Back-propagation: forward in execution order with Collect before each
/// layer's feature computation, then backward in reverse order with Update
/// after each layer's gradient computation. BPTT runs the same procedure
/// over the unrolled net.
pub fn bp_train_one_batch(net: &mut NeuralNet, ctx: &mut dyn ExecContext, iteration: u64) -> Result<StepStats> {
    forward_pass(net, ctx, iteration)?;
    backward_pass(net, ctx, iteration)?;
    Ok(StepStats {
        loss: net.loss_value(),
        stats: net.loss_stats(),
    })
}

/// Contrastive divergence: the positive phase samples hidden states, then
/// each RBM pair runs `k` Gibbs steps before gradients are emitted.
pub fn cd_train_one_batch(net: &mut NeuralNet, ctx: &mut dyn ExecContext, k: usize, iteration: u64) -> Result<StepStats> {
    let pairs = net.rbm_pairs();
    if pairs.is_empty() {
        return Err(Error::config("contrastive divergence needs rbm_vis/rbm_hid layers"));
    }
    if k == 0 {
        return Err(Error::config("contrastive divergence needs at least one Gibbs step"));
    }
    forward_pass(net, ctx, iteration)?;
    for &(vis, hid) in &pairs {
        for step in 1..=k {
            net.rbm_reconstruct(vis, hid)?;
            net.rbm_negative(vis, hid, step == k, ctx)?;
        }
    }
    backward_pass(net, ctx, iteration)?;
    let stats = net.loss_stats();
    Ok(StepStats {
        loss: stats.loss_sum / stats.count.max(1) as f64,
        stats,
    })
}

/// Runs one iteration of `algorithm`, turning non-finite values into a
/// divergence error for `iteration`.
pub fn train_one_batch(
    net: &mut NeuralNet,
    ctx: &mut dyn ExecContext,
    algorithm: Algorithm,
    iteration: u64,
) -> Result<StepStats> {
    let step = match algorithm {
        Algorithm::Bp | Algorithm::Bptt => bp_train_one_batch(net, ctx, iteration),
        Algorithm::Cd { k } => cd_train_one_batch(net, ctx, k, iteration),
    }
    .map_err(diverged(iteration))?;
    if !step.loss.is_finite() {
        return Err(Error::Diverged {
            iteration,
            loss: step.loss,
        });
    }
    Ok(step)
}

/// Test-phase metrics over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Mean per-example loss.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub count: usize,
}

/// Runs the test phase over `data` in consecutive batches of at most
/// `batch` rows. RBM nets report the cross-entropy of a deterministic
/// reconstruction.
pub fn evaluate(net: &mut NeuralNet, env: &mut dyn LayerEnv, data: &Dataset, batch: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Evaluation("the test set is empty".into()));
    }
    let batch = batch.max(1);
    let pairs = net.rbm_pairs();
    let mut total = LossStats::default();
    let mut start = 0;
    while start < data.len() {
        let len = batch.min(data.len() - start);
        net.set_batch(data.range(start, len));
        net.forward(Phase::Test, env)?;
        for &(vis, hid) in &pairs {
            net.rbm_reconstruct(vis, hid)?;
        }
        total.merge(&net.loss_stats());
        start += len;
    }
    if total.count == 0 {
        return Err(Error::Evaluation("the net has no loss layer to evaluate".into()));
    }
    Ok(EvalMetrics {
        loss: total.loss_sum / total.count as f64,
        accuracy: total.has_accuracy.then(|| total.correct as f64 / total.count as f64),
        count: total.count,
    })
}

#[cfg(test)]
mod tests;
