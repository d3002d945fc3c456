#![allow(dead_code)]

use std::collections::BTreeMap;

use minisinga::data::Dataset;
use minisinga::netgraph::{BuildOptions, NetConfig, NeuralNet};
use minisinga::paramserver::UpdaterConfig;
use minisinga::training::{train_one_batch, Algorithm, LocalContext};
use minisinga::Blob;

/// Plain single-threaded training: the reference every distributed run is
/// compared against. Returns the parameters after each iteration.
pub fn sequential(
    cfg: &NetConfig,
    algorithm: Algorithm,
    updater: UpdaterConfig,
    data: &Dataset,
    batch: usize,
    iterations: u64,
    seed: u64,
) -> Vec<BTreeMap<String, Blob>> {
    let mut net = NeuralNet::build(&cfg.pipeline(1).unwrap(), BuildOptions { batch, seed }).unwrap();
    let mut ctx = LocalContext::new(seed).with_updater(updater);
    let mut out = Vec::new();
    for t in 0..iterations {
        net.set_batch(data.batch((t as usize * batch) % data.len(), batch));
        train_one_batch(&mut net, &mut ctx, algorithm, t).unwrap();
        out.push(ctx.values());
    }
    out
}

pub fn max_diff(a: &BTreeMap<String, Blob>, b: &BTreeMap<String, Blob>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter()
        .map(|(k, x)| {
            let y = &b[k];
            assert_eq!(x.shape(), y.shape(), "{k}");
            x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
