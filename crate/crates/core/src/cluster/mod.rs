//! The runtime: worker and server units connected through a per-host stub
//! that routes messages, and the topology that decides the training
//! framework.
//!
//! Every unit runs on its own thread with a private inbox. Workers run
//! TrainOneBatch over their net fragment and exchange parameters with the
//! server group their worker group maps to; servers own parameter slices.
//! The driver launches the units, gathers metrics and parameter snapshots,
//! and shuts everything down.

mod launch;
mod message;
mod router;
mod server;
mod worker;

use serde::{Deserialize, Serialize};

pub use launch::{launch, Counters, MetricRow, MetricsPhase, RunReport, RunSpec};
pub use message::{read_frame, write_frame, Addr, Kind, Message, Role};

use crate::error::{Error, Result};

/// How server groups exchange parameter deltas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NeighborTopology {
    #[default]
    AllToAll,
    Ring,
    /// `lists[g]` names the neighbors of server group `g`.
    Custom { lists: Vec<Vec<usize>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    InProcess,
    /// Workers and servers on two simulated hosts joined by loopback TCP.
    Socket,
}

fn one() -> usize {
    1
}

fn default_sync_every() -> u64 {
    50
}

/// Counts and wiring of worker and server groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default = "one")]
    pub worker_groups: usize,
    #[serde(default = "one")]
    pub workers_per_group: usize,
    #[serde(default = "one")]
    pub server_groups: usize,
    #[serde(default = "one")]
    pub servers_per_group: usize,
    #[serde(default)]
    pub neighbors: NeighborTopology,
    /// Applied updates per slice between delta exchanges.
    #[serde(default = "default_sync_every")]
    pub sync_every: u64,
    #[serde(default)]
    pub transport: Transport,
    /// Workers and servers of matching index share a node.
    #[serde(default)]
    pub colocated: bool,
    /// Iterations group 0 runs alone before other worker groups start.
    #[serde(default)]
    pub warmup: u64,
}

impl Default for Topology {
    fn default() -> Self {
        Topology::new(1, 1, 1, 1)
    }
}

/// The training framework a topology amounts to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Sandblaster,
    AllReduce,
    Downpour,
    Hogwild,
}

impl Topology {
    pub fn new(worker_groups: usize, workers_per_group: usize, server_groups: usize, servers_per_group: usize) -> Self {
        Topology {
            worker_groups,
            workers_per_group,
            server_groups,
            servers_per_group,
            neighbors: NeighborTopology::AllToAll,
            sync_every: default_sync_every(),
            transport: Transport::InProcess,
            colocated: false,
            warmup: 0,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let counts = [
            ("worker_groups", self.worker_groups),
            ("workers_per_group", self.workers_per_group),
            ("server_groups", self.server_groups),
            ("servers_per_group", self.servers_per_group),
        ];
        for (field, n) in counts {
            if n == 0 {
                return Err(Error::validation(format!("{path}.{field}"), "must be at least 1"));
            }
            if n > u16::MAX as usize {
                return Err(Error::validation(format!("{path}.{field}"), "too large"));
            }
        }
        if self.server_groups > self.worker_groups {
            return Err(Error::validation(
                format!("{path}.server_groups"),
                "every server group needs at least one worker group",
            ));
        }
        if let NeighborTopology::Custom { lists } = &self.neighbors {
            if lists.len() != self.server_groups {
                return Err(Error::validation(
                    format!("{path}.neighbors.lists"),
                    format!("needs one list per server group ({})", self.server_groups),
                ));
            }
            for (g, list) in lists.iter().enumerate() {
                for &n in list {
                    if n >= self.server_groups || n == g {
                        return Err(Error::validation(
                            format!("{path}.neighbors.lists[{g}]"),
                            format!("unknown neighbor server group {n}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// The server group worker group `g` talks to.
    pub fn server_group_of(&self, worker_group: usize) -> usize {
        worker_group % self.server_groups
    }

    /// Worker groups served by server group `sg`, ascending.
    pub fn worker_groups_of(&self, server_group: usize) -> Vec<usize> {
        (0..self.worker_groups).filter(|&g| self.server_group_of(g) == server_group).collect()
    }

    /// Server groups that exchange deltas with `sg`, ascending.
    pub fn neighbors_of(&self, server_group: usize) -> Vec<usize> {
        let n = self.server_groups;
        let mut out: Vec<usize> = match &self.neighbors {
            NeighborTopology::AllToAll => (0..n).filter(|&g| g != server_group).collect(),
            NeighborTopology::Ring => [(server_group + 1) % n, (server_group + n - 1) % n]
                .into_iter()
                .filter(|&g| g != server_group)
                .collect(),
            NeighborTopology::Custom { lists } => lists.get(server_group).cloned().unwrap_or_default(),
        };
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Synchronous training: one worker group whose updates are aggregated
    /// before being applied.
    pub fn is_sync(&self) -> bool {
        self.worker_groups == 1
    }
}

/// Classifies a topology. Used for logging and validation only: behavior
/// follows from the counts themselves.
pub fn realize_framework(t: &Topology) -> Framework {
    match (t.worker_groups, t.server_groups) {
        (1, 1) if t.colocated && t.workers_per_group == t.servers_per_group => Framework::AllReduce,
        (1, _) => Framework::Sandblaster,
        (_, 1) => Framework::Downpour,
        _ => Framework::Hogwild,
    }
}
