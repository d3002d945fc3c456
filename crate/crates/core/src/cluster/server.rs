use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use crossbeam_channel::Receiver;

use super::launch::{SnapshotPlan, Tally};
use super::message::{Addr, Kind, Message, Role, GET_TOTAL};
use super::router::Link;
use crate::error::{Error, Result};
use crate::paramserver::{GetMode, ParamShard, ShardEvent};

struct Parked {
    requester: Addr,
    min_version: u64,
    mode: GetMode,
}

/// Serves one shard until the driver and every neighbor server group have
/// sent STOP, then returns the shard.
pub(crate) fn run(
    mut shard: ParamShard,
    link: Link,
    inbox: Receiver<Message>,
    plan: SnapshotPlan,
    tally: Arc<Tally>,
) -> Result<ParamShard> {
    let cfg = shard.config().clone();
    let me = Addr::server(cfg.server_group, cfg.server_id);
    // Snapshots follow the lowest worker group of server group 0.
    let snapshot_group = (cfg.server_group == 0).then(|| cfg.worker_groups.first().copied()).flatten();
    let mut parked: BTreeMap<u32, Vec<Parked>> = BTreeMap::new();
    let mut driver_stopped = false;
    let mut neighbor_stops = 0;

    while !(driver_stopped && neighbor_stops >= cfg.neighbors.len()) {
        let mut msg = inbox.recv().map_err(|_| Error::Stopped)?;
        match msg.kind {
            Kind::Update => {
                let grad = msg.take_payload()?;
                tally.updates_received.fetch_add(1, Ordering::Relaxed);
                let events = shard.handle_update(
                    msg.id,
                    msg.src.group as usize,
                    msg.src.unit as usize,
                    msg.version as u64,
                    msg.reserved as usize,
                    grad,
                )?;
                for event in events {
                    match event {
                        ShardEvent::Applied {
                            slice,
                            group,
                            group_version,
                            ..
                        } => {
                            tally.updates_applied.fetch_add(1, Ordering::Relaxed);
                            serve_parked(&shard, &mut parked, slice, me, &link)?;
                            if snapshot_group == Some(group) && plan.wants(group_version) {
                                let value = shard.slice(slice).expect("just applied").value.clone();
                                link.send(
                                    Message::new(Kind::Put, me, Addr::DRIVER, slice, group_version as u32)
                                        .with_payload(value),
                                )?;
                            }
                        }
                        ShardEvent::SendSync { slice, neighbor, delta } => {
                            tally.syncs_sent.fetch_add(1, Ordering::Relaxed);
                            let dst = Addr::server(neighbor, cfg.server_id);
                            let version = shard.slice(slice).map_or(0, |s| s.version) as u32;
                            link.send(Message::new(Kind::Sync, me, dst, slice, version).with_payload(delta))?;
                        }
                    }
                }
            }
            Kind::Get => {
                let mode = if msg.reserved == GET_TOTAL {
                    GetMode::Total
                } else {
                    GetMode::Group(msg.src.group as usize)
                };
                let min_version = msg.version as u64;
                match shard.handle_get(msg.id, min_version, mode)? {
                    Some((value, version)) => link.send(
                        Message::new(Kind::Response, me, msg.src, msg.id, version as u32).with_payload(value),
                    )?,
                    None => {
                        tally.gets_parked.fetch_add(1, Ordering::Relaxed);
                        parked.entry(msg.id).or_default().push(Parked {
                            requester: msg.src,
                            min_version,
                            mode,
                        });
                    }
                }
            }
            Kind::Sync => {
                let delta = msg.take_payload()?;
                shard.handle_sync(msg.id, &delta)?;
                tally.syncs_merged.fetch_add(1, Ordering::Relaxed);
            }
            Kind::Stop if msg.is_abort() => return Err(Error::Stopped),
            Kind::Stop if msg.src.role == Role::Driver => {
                driver_stopped = true;
                for &n in &cfg.neighbors {
                    link.send(Message::stop(me, Addr::server(n, cfg.server_id)))?;
                }
            }
            Kind::Stop => neighbor_stops += 1,
            other => {
                return Err(Error::protocol(format!("server {me:?} cannot handle {other:?} from {:?}", msg.src)));
            }
        }
    }
    if !parked.is_empty() {
        log::warn!("server {me:?} exits with {} parked requests", parked.values().map(Vec::len).sum::<usize>());
    }
    Ok(shard)
}

fn serve_parked(
    shard: &ParamShard,
    parked: &mut BTreeMap<u32, Vec<Parked>>,
    slice: u32,
    me: Addr,
    link: &Link,
) -> Result<()> {
    let Some(waiting) = parked.remove(&slice) else {
        return Ok(());
    };
    let mut still = Vec::new();
    for p in waiting {
        match shard.handle_get(slice, p.min_version, p.mode)? {
            Some((value, version)) => link.send(
                Message::new(Kind::Response, me, p.requester, slice, version as u32).with_payload(value),
            )?,
            None => still.push(p),
        }
    }
    if !still.is_empty() {
        parked.insert(slice, still);
    }
    Ok(())
}
