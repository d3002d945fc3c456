//! Server-side parameter storage: slicing of parameters across the servers
//! of a group, the update rules, and the per-server shard state machine.

mod shard;
mod updater;

pub use shard::{GetMode, ParamShard, ShardConfig, ShardEvent, SliceState};
pub use updater::{Schedule, UpdaterConfig, UpdaterKind, UpdaterState};

use crate::tensor::split_sizes;

/// One contiguous piece of a parameter, owned by one server of each group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceInfo {
    pub id: u32,
    pub param: String,
    /// Offset into the row-major values of the parameter.
    pub offset: usize,
    pub len: usize,
    pub server: usize,
}

/// Splits every parameter into at most `servers` contiguous slices of
/// near-equal size and assigns each slice to the currently least-loaded
/// server (lowest id on ties), visiting parameters in name order.
///
/// `params` holds `(name, element count)` pairs; the result is ordered by
/// slice id and depends only on the names, sizes and `servers`.
pub fn partition_params(params: &[(String, usize)], servers: usize) -> Vec<SliceInfo> {
    let servers = servers.max(1);
    let mut sorted: Vec<&(String, usize)> = params.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut load = vec![0usize; servers];
    let mut out = Vec::new();
    for (name, numel) in sorted {
        if *numel == 0 {
            continue;
        }
        let parts = servers.min(*numel);
        let sizes = split_sizes(*numel, parts).expect("1 <= parts <= numel");
        let mut offset = 0;
        for len in sizes {
            let server = (0..servers).min_by_key(|&s| (load[s], s)).expect("servers >= 1");
            load[server] += len;
            out.push(SliceInfo {
                id: out.len() as u32,
                param: name.clone(),
                offset,
                len,
                server,
            });
            offset += len;
        }
    }
    out
}
