mod common;

use minisinga::cluster::{launch, Framework, MetricsPhase, RunSpec, Topology, Transport};
use minisinga::data::SyntheticSpec;
use minisinga::netgraph::PartitionDim;
use minisinga::paramserver::UpdaterConfig;
use minisinga::presets;
use minisinga::training::Algorithm;
use minisinga::Dim;

use common::{max_diff, sequential};

fn spec(k: usize, servers: usize, transport: Transport, iterations: u64) -> RunSpec {
    let data = SyntheticSpec::gaussians(128, 8, 3, 0.5).generate(3).unwrap();
    let mut s = RunSpec::new(presets::mlp(8, &[6], 3), UpdaterConfig::sgd(0.1), data, 16, iterations);
    s.seed = 11;
    s.net.default_partition_dim = Some(PartitionDim::Dim(Dim::Rows));
    s.topology = Topology {
        transport,
        ..Topology::new(1, k, 1, servers)
    };
    s.record_trajectory = true;
    s
}

#[test]
fn sandblaster_tracks_sequential_training() {
    for transport in [Transport::InProcess, Transport::Socket] {
        for (k, servers) in [(1, 1), (2, 1), (2, 3), (4, 2)] {
            let s = spec(k, servers, transport, 12);
            let reference = sequential(&s.net, Algorithm::Bp, s.updater, &s.train, 16, 12, s.seed);
            let report = launch(&s).unwrap();
            assert_eq!(report.framework, Framework::Sandblaster);
            assert_eq!(report.trajectory.len(), 12);
            for (t, (v, params)) in report.trajectory.iter().enumerate() {
                assert_eq!(*v, t as u64 + 1);
                let d = max_diff(params, &reference[t]);
                assert!(d < 1e-10, "k={k} servers={servers} {transport:?} iteration {t}: {d:e}");
            }
            assert!(max_diff(&report.params, &reference[11]) < 1e-10);
            let c = report.counters;
            assert_eq!(c.updates_sent, c.updates_received + c.updates_absorbed);
            assert_eq!(c.messages_dropped, 0);
            if transport == Transport::Socket {
                assert!(c.frames_in > 0 && c.frames_in == c.frames_out);
            }
        }
    }
}

#[test]
fn metrics_rows_cover_every_iteration() {
    let mut s = spec(2, 1, Transport::InProcess, 10);
    s.test = Some(s.train.clone());
    s.test_every = 4;
    let report = launch(&s).unwrap();
    let train: Vec<u64> = report.metrics.iter().filter(|r| r.phase == MetricsPhase::Train).map(|r| r.iteration).collect();
    assert_eq!(train, (0..10).collect::<Vec<_>>());
    let test: Vec<u64> = report.metrics.iter().filter(|r| r.phase == MetricsPhase::Test).map(|r| r.iteration).collect();
    assert_eq!(test, [4, 8, 10]);
    assert!(report.metrics.iter().all(|r| r.loss.is_finite() && r.accuracy.is_some()));
}

#[test]
fn model_and_hybrid_partitions_track_sequential_training() {
    let hybrid = |s: &mut RunSpec| {
        s.net.default_partition_dim = Some(PartitionDim::Dim(Dim::Rows));
        s.net.layer_mut("h1").unwrap().partition_dim = Some(PartitionDim::Dim(Dim::Cols));
        s.net.layer_mut("a1").unwrap().partition_dim = Some(PartitionDim::Dim(Dim::Cols));
    };
    let cols = |s: &mut RunSpec| s.net.default_partition_dim = Some(PartitionDim::Dim(Dim::Cols));
    for (name, setup) in [("cols", &cols as &dyn Fn(&mut RunSpec)), ("hybrid", &hybrid)] {
        for transport in [Transport::InProcess, Transport::Socket] {
            let mut s = spec(2, 2, transport, 8);
            setup(&mut s);
            let reference = sequential(&s.net, Algorithm::Bp, s.updater, &s.train, 16, 8, s.seed);
            let report = launch(&s).unwrap();
            for (t, (_, params)) in report.trajectory.iter().enumerate() {
                let d = max_diff(params, &reference[t]);
                assert!(d < 1e-10, "{name} {transport:?} iteration {t}: {d:e}");
            }
        }
    }
}

#[test]
fn downpour_applies_every_update() {
    let mut s = spec(1, 2, Transport::InProcess, 30);
    s.topology = Topology::new(3, 1, 1, 2);
    s.record_trajectory = false;
    let report = launch(&s).unwrap();
    assert_eq!(report.framework, Framework::Downpour);
    let c = report.counters;
    assert_eq!(c.updates_absorbed, 0);
    assert_eq!(c.updates_sent, c.updates_received);
    assert_eq!(c.updates_received, c.updates_applied);
    // 3 groups x 30 iterations x 2 params per IP layer x 2 layers, split over servers.
    assert!(c.updates_sent >= 3 * 30 * 4);
    assert!(report.params.values().all(|b| b.data().iter().all(|x| x.is_finite())));
}

#[test]
fn hogwild_groups_converge_to_shared_values_after_sync() {
    let mut s = spec(1, 1, Transport::InProcess, 40);
    s.topology = Topology {
        colocated: true,
        sync_every: 5,
        ..Topology::new(2, 1, 2, 1)
    };
    s.record_trajectory = false;
    let report = launch(&s).unwrap();
    assert_eq!(report.framework, Framework::Hogwild);
    assert_eq!(report.group_params.len(), 2);
    assert!(report.group_syncs_sent.iter().all(|&n| n > 0));
    let c = report.counters;
    assert_eq!(c.syncs_sent, c.syncs_merged);
}

#[test]
fn divergence_stops_the_whole_job() {
    let mut s = spec(2, 1, Transport::InProcess, 50);
    s.updater = UpdaterConfig::sgd(1e308);
    s.record_trajectory = false;
    match launch(&s).err() {
        Some(minisinga::Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}
