use std::collections::BTreeMap;

use super::updater::{UpdaterConfig, UpdaterState};
use crate::error::{Error, Result};
use crate::tensor::Blob;

/// Static settings of one server.
#[derive(Debug, Clone)]
pub struct ShardConfig {
    pub server_group: usize,
    pub server_id: usize,
    /// Worker groups that talk to this server group.
    pub worker_groups: Vec<usize>,
    /// Contributions needed before a group's gradient is applied.
    pub workers_per_group: usize,
    pub updater: UpdaterConfig,
    /// Applied updates between delta exchanges with neighbor groups; 0 disables.
    pub sync_every: u64,
    pub neighbors: Vec<usize>,
}

/// What a GET waits for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GetMode {
    /// Until the given worker group's updates applied reach the minimum.
    Group(usize),
    /// Until the total applied updates reach the minimum.
    Total,
}

/// Server-side state of one parameter slice.
#[derive(Debug, Clone)]
pub struct SliceState {
    /// Flattened values, stored as a `1×len` blob.
    pub value: Blob,
    /// Total applied updates.
    pub version: u64,
    pub group_applied: BTreeMap<usize, u64>,
    pub updater: UpdaterState,
    /// Value at the last delta exchange, including merged neighbor deltas.
    pub last_synced: Blob,
    pub since_sync: u64,
    pub syncs_sent: u64,
    pub syncs_merged: u64,
}

/// Observable effects of handling an update.
#[derive(Debug, Clone, PartialEq)]
pub enum ShardEvent {
    Applied {
        slice: u32,
        version: u64,
        group: usize,
        group_version: u64,
    },
    SendSync {
        slice: u32,
        neighbor: usize,
        delta: Blob,
    },
}

type PendingKey = (u32, usize, u64);

/// The slices owned by one server, with buffered partial aggregates.
#[derive(Debug, Clone)]
pub struct ParamShard {
    config: ShardConfig,
    slices: BTreeMap<u32, SliceState>,
    pending: BTreeMap<PendingKey, BTreeMap<usize, (Blob, usize)>>,
    received: u64,
}

impl ParamShard {
    pub fn new(config: ShardConfig, initial: impl IntoIterator<Item = (u32, Blob)>) -> Self {
        let slices = initial
            .into_iter()
            .map(|(id, value)| {
                let state = SliceState {
                    last_synced: value.clone(),
                    value,
                    version: 0,
                    group_applied: config.worker_groups.iter().map(|&g| (g, 0)).collect(),
                    updater: UpdaterState::default(),
                    since_sync: 0,
                    syncs_sent: 0,
                    syncs_merged: 0,
                };
                (id, state)
            })
            .collect();
        ParamShard {
            config,
            slices,
            pending: BTreeMap::new(),
            received: 0,
        }
    }

    pub fn config(&self) -> &ShardConfig {
        &self.config
    }

    pub fn slice(&self, id: u32) -> Option<&SliceState> {
        self.slices.get(&id)
    }

    pub fn slices(&self) -> &BTreeMap<u32, SliceState> {
        &self.slices
    }

    pub fn into_slices(self) -> BTreeMap<u32, SliceState> {
        self.slices
    }

    /// UPDATE messages received so far, counting pre-aggregated ones once.
    pub fn received(&self) -> u64 {
        self.received
    }

    /// Updates applied so far, summed over slices.
    pub fn applied(&self) -> u64 {
        self.slices.values().map(|s| s.version).sum()
    }

    /// Contributions buffered while waiting for the rest of their group.
    pub fn pending(&self) -> usize {
        self.pending.values().map(BTreeMap::len).sum()
    }

    fn state_mut(&mut self, id: u32) -> Result<&mut SliceState> {
        let (g, s) = (self.config.server_group, self.config.server_id);
        self.slices
            .get_mut(&id)
            .ok_or_else(|| Error::Routing(format!("slice {id} is not owned by server {s} of group {g}")))
    }

    /// Buffers one contribution covering `weight` workers and applies the
    /// group's summed gradient once every worker has contributed. Partial
    /// gradients are summed in ascending unit order.
    pub fn handle_update(
        &mut self,
        slice: u32,
        group: usize,
        unit: usize,
        iteration: u64,
        weight: usize,
        grad: Blob,
    ) -> Result<Vec<ShardEvent>> {
        let need = self.config.workers_per_group;
        let state = self.state_mut(slice)?;
        if grad.shape() != state.value.shape() {
            return Err(Error::protocol(format!(
                "gradient shape {:?} for slice {slice} of shape {:?}",
                grad.shape(),
                state.value.shape()
            )));
        }
        let done = *state
            .group_applied
            .get(&group)
            .ok_or_else(|| Error::Routing(format!("worker group {group} is not served by this server group")))?;
        if iteration < done {
            return Err(Error::protocol(format!(
                "update for slice {slice} from group {group} unit {unit} at iteration {iteration}, which was already applied"
            )));
        }
        self.received += 1;
        let entry = self.pending.entry((slice, group, iteration)).or_default();
        if entry.contains_key(&unit) {
            return Err(Error::protocol(format!(
                "duplicate update for slice {slice} from group {group} unit {unit} at iteration {iteration}"
            )));
        }
        entry.insert(unit, (grad, weight.max(1)));
        let have: usize = entry.values().map(|(_, w)| w).sum();
        if have < need {
            return Ok(Vec::new());
        }
        if have > need {
            return Err(Error::protocol(format!(
                "slice {slice} received {have} contributions at iteration {iteration}, expected {need}"
            )));
        }
        let parts = self.pending.remove(&(slice, group, iteration)).expect("entry exists");
        let mut total: Option<Blob> = None;
        for (_, (g, _)) in parts {
            match &mut total {
                None => total = Some(g),
                Some(t) => t.add_assign(&g)?,
            }
        }
        let total = total.expect("at least one contribution");
        self.apply(slice, group, &total)
    }

    fn apply(&mut self, slice: u32, group: usize, grad: &Blob) -> Result<Vec<ShardEvent>> {
        let updater = self.config.updater;
        let sync_every = self.config.sync_every;
        let neighbors = self.config.neighbors.clone();
        let state = self.state_mut(slice)?;
        updater.apply(state.value.data_mut(), &mut state.updater, grad.data(), state.version)?;
        state.version += 1;
        let group_version = {
            let c = state.group_applied.get_mut(&group).expect("checked by caller");
            *c += 1;
            *c
        };
        state.since_sync += 1;
        let mut events = vec![ShardEvent::Applied {
            slice,
            version: state.version,
            group,
            group_version,
        }];
        if sync_every > 0 && !neighbors.is_empty() && state.since_sync >= sync_every {
            let delta = state.value.sub(&state.last_synced)?;
            state.last_synced = state.value.clone();
            state.since_sync = 0;
            state.syncs_sent += 1;
            for n in neighbors {
                events.push(ShardEvent::SendSync {
                    slice,
                    neighbor: n,
                    delta: delta.clone(),
                });
            }
        }
        Ok(events)
    }

    /// Returns a copy of the slice once it is fresh enough, or `None` when
    /// the request has to wait.
    pub fn handle_get(&self, slice: u32, min_version: u64, mode: GetMode) -> Result<Option<(Blob, u64)>> {
        let state = self
            .slices
            .get(&slice)
            .ok_or_else(|| Error::Routing(format!("slice {slice} is not owned by this server")))?;
        let reached = match mode {
            GetMode::Total => state.version,
            GetMode::Group(g) => *state
                .group_applied
                .get(&g)
                .ok_or_else(|| Error::Routing(format!("worker group {g} is not served by this server group")))?,
        };
        Ok((reached >= min_version).then(|| (state.value.clone(), state.version)))
    }

    /// Folds a neighbor group's delta into the slice. Merges do not count
    /// as updates and are never forwarded again.
    pub fn handle_sync(&mut self, slice: u32, delta: &Blob) -> Result<()> {
        let state = self.state_mut(slice)?;
        state.value.add_assign(delta)?;
        state.last_synced.add_assign(delta)?;
        state.syncs_merged += 1;
        Ok(())
    }
}
