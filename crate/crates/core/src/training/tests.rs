use super::*;
use crate::layers::{Batch, LayerKind};
use crate::netgraph::{BuildOptions, LayerDecl, NetConfig};
use crate::presets;
use crate::rng::Tape;

fn build(cfg: &NetConfig, batch: usize) -> NeuralNet {
    NeuralNet::build(&cfg.pipeline(1).unwrap(), BuildOptions { batch, seed: 9 }).unwrap()
}

fn batch(rows: &[&[f64]], labels: &[f64]) -> Batch {
    Batch {
        features: Blob::from_rows(rows),
        labels: Blob::from_vec(labels.len(), 1, labels.to_vec()).unwrap(),
    }
}

fn set(net: &mut NeuralNet, name: &str, value: Blob) {
    net.params_mut().get_mut(name).unwrap().refresh(value, 0).unwrap();
}

fn to_rows(b: &Blob) -> Vec<Vec<f64>> {
    (0..b.rows()).map(|r| b.row(r).to_vec()).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn linear_net() -> NetConfig {
    NetConfig::new(vec![
        LayerDecl::new("data", LayerKind::Input { dim: 2 }, &[]),
        LayerDecl::new("label", LayerKind::Label { column: None }, &[]),
        LayerDecl::new("out", LayerKind::InnerProduct { out: 1 }, &["data"]),
        LayerDecl::new("loss", LayerKind::EuclideanLoss, &["out", "label"]),
    ])
}

#[test]
fn sgd_on_linear_regression_matches_hand_iteration() {
    let xs = [[1.0, 2.0], [-0.5, 0.25], [3.0, -1.0]];
    let ys = [1.0, -2.0, 0.5];
    let lr = 0.05;
    let mut net = build(&linear_net(), 3);
    net.set_batch(batch(&[&xs[0], &xs[1], &xs[2]], &ys));
    let mut ctx = LocalContext::new(1).with_updater(UpdaterConfig::sgd(lr));

    // Oracle: loss = Σ ½(x·w + b − y)² / n, stepped by plain gradient descent.
    let mut w = net.params().value("out/W").unwrap().data().to_vec();
    let mut b = 0.0;
    for it in 0..4 {
        let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x[0] * w[0] + x[1] * w[1] + b - y).collect();
        let loss: f64 = diffs.iter().map(|d| 0.5 * d * d).sum::<f64>() / 3.0;
        let gw: Vec<f64> = (0..2).map(|j| xs.iter().zip(&diffs).map(|(x, d)| x[j] * d).sum::<f64>() / 3.0).collect();
        let gb: f64 = diffs.iter().sum::<f64>() / 3.0;

        let step = train_one_batch(&mut net, &mut ctx, Algorithm::Bp, it).unwrap();
        assert!((step.loss - loss).abs() < 1e-12, "iteration {it}: {} vs {loss}", step.loss);
        for j in 0..2 {
            w[j] -= lr * gw[j];
        }
        b -= lr * gb;
        let values = ctx.values();
        for j in 0..2 {
            assert!((values["out/W"].data()[j] - w[j]).abs() < 1e-12);
        }
        assert!((values["out/b"].data()[0] - b).abs() < 1e-12);
    }
}

#[test]
fn parameter_free_net_never_collects_or_updates() {
    let cfg = NetConfig::new(vec![
        LayerDecl::new("data", LayerKind::Input { dim: 1 }, &[]),
        LayerDecl::new("label", LayerKind::Label { column: None }, &[]),
        LayerDecl::new("act", LayerKind::Sigmoid, &["data"]),
        LayerDecl::new("loss", LayerKind::EuclideanLoss, &["act", "label"]),
    ]);
    let mut net = build(&cfg, 2);
    net.set_batch(batch(&[&[0.0], &[1.0]], &[0.5, 0.0]));
    net.enable_trace();
    let mut ctx = LocalContext::new(1).with_updater(UpdaterConfig::sgd(0.1));
    let step = bp_train_one_batch(&mut net, &mut ctx, 0).unwrap();
    let expected = 0.5 * (sig(1.0) * sig(1.0)) / 2.0;
    assert!((step.loss - expected).abs() < 1e-12);
    assert_eq!((ctx.collects, ctx.updates), (0, 0));
    assert!(net
        .take_trace()
        .iter()
        .all(|e| !matches!(e, TraceEvent::Collect { .. } | TraceEvent::Update { .. })));
}

#[test]
fn zero_learning_rate_repeats_the_same_loss() {
    let mut net = build(&presets::mlp(2, &[3], 2), 2);
    net.set_batch(batch(&[&[0.3, -0.7], &[1.0, 0.2]], &[0.0, 1.0]));
    let mut ctx = LocalContext::new(1).with_updater(UpdaterConfig::sgd(0.0));
    let first = train_one_batch(&mut net, &mut ctx, Algorithm::Bp, 0).unwrap().loss;
    for it in 1..5 {
        assert_eq!(train_one_batch(&mut net, &mut ctx, Algorithm::Bp, it).unwrap().loss, first);
    }
}

#[test]
fn trace_collects_before_forward_and_updates_after_backward() {
    let mut net = build(&presets::mlp(2, &[2], 2), 1);
    net.set_batch(batch(&[&[1.0, 0.0]], &[1.0]));
    net.enable_trace();
    bp_train_one_batch(&mut net, &mut LocalContext::new(1), 0).unwrap();
    let fwd = |l: &str| TraceEvent::Forward { layer: l.into() };
    let bwd = |l: &str| TraceEvent::Backward { layer: l.into() };
    let col = |l: &str, p: &str| TraceEvent::Collect {
        layer: l.into(),
        param: p.into(),
    };
    let upd = |l: &str, p: &str| TraceEvent::Update {
        layer: l.into(),
        param: p.into(),
    };
    assert_eq!(
        net.take_trace(),
        vec![
            fwd("data"),
            fwd("label"),
            col("h1", "h1/W"),
            col("h1", "h1/b"),
            fwd("h1"),
            fwd("a1"),
            col("out", "out/W"),
            col("out", "out/b"),
            fwd("out"),
            fwd("loss"),
            bwd("loss"),
            bwd("out"),
            upd("out", "out/W"),
            upd("out", "out/b"),
            bwd("a1"),
            bwd("h1"),
            upd("h1", "h1/W"),
            upd("h1", "h1/b"),
        ]
    );
}

/// CD-k on one RBM with explicit loops, sampling from `uniforms` in row-major order.
struct CdOracle {
    dw: Vec<Vec<f64>>,
    da: Vec<f64>,
    dc: Vec<f64>,
    loss: f64,
}

fn cd_oracle(v: &[Vec<f64>], w: &[Vec<f64>], a: &[f64], c: &[f64], k: usize, uniforms: &[f64]) -> CdOracle {
    let (n, nv, nh) = (v.len(), a.len(), c.len());
    let mut u = uniforms.iter();
    let hidden_prob = |x: &[f64]| -> Vec<f64> { (0..nh).map(|j| sig(c[j] + (0..nv).map(|i| x[i] * w[i][j]).sum::<f64>())).collect() };
    let visible_prob = |h: &[f64]| -> Vec<f64> { (0..nv).map(|i| sig(a[i] + (0..nh).map(|j| h[j] * w[i][j]).sum::<f64>())).collect() };
    let pos: Vec<Vec<f64>> = v.iter().map(|x| hidden_prob(x)).collect();
    let mut sample: Vec<Vec<f64>> = pos
        .iter()
        .map(|p| p.iter().map(|&p| if *u.next().unwrap() < p { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut recon = Vec::new();
    let mut neg = Vec::new();
    let mut loss = 0.0;
    for step in 1..=k {
        recon = sample.iter().map(|h| visible_prob(h)).collect::<Vec<_>>();
        if step == 1 {
            for (x, r) in v.iter().zip(&recon) {
                for i in 0..nv {
                    loss -= x[i] * r[i].ln() + (1.0 - x[i]) * (1.0 - r[i]).ln();
                }
            }
        }
        neg = recon.iter().map(|r| hidden_prob(r)).collect::<Vec<_>>();
        if step < k {
            sample = neg
                .iter()
                .map(|p| p.iter().map(|&p| if *u.next().unwrap() < p { 1.0 } else { 0.0 }).collect())
                .collect();
        }
    }
    let nf = n as f64;
    let mut dw = vec![vec![0.0; nh]; nv];
    for r in 0..n {
        for i in 0..nv {
            for j in 0..nh {
                dw[i][j] += (recon[r][i] * neg[r][j] - v[r][i] * pos[r][j]) / nf;
            }
        }
    }
    let da = (0..nv).map(|i| (0..n).map(|r| recon[r][i] - v[r][i]).sum::<f64>() / nf).collect();
    let dc = (0..nh).map(|j| (0..n).map(|r| neg[r][j] - pos[r][j]).sum::<f64>() / nf).collect();
    CdOracle { dw, da, dc, loss: loss / nf }
}

fn check_cd(k: usize, uniforms: Vec<f64>) {
    let v = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
    let mut net = build(&presets::rbm(3, 2), 2);
    net.set_batch(batch(&[&v[0], &v[1]], &[0.0, 0.0]));
    let vis_bias = net.layer("vis").unwrap().params[1].clone();
    set(&mut net, &vis_bias, Blob::row_vector(vec![0.1, -0.2, 0.3]));
    set(&mut net, "hid/b", Blob::row_vector(vec![-0.4, 0.25]));
    let w = to_rows(net.params().value("hid/W").unwrap());
    let oracle = cd_oracle(&v, &w, &[0.1, -0.2, 0.3], &[-0.4, 0.25], k, &uniforms);

    let mut ctx = LocalContext::with_rng(Box::new(Tape::new(uniforms)));
    let step = train_one_batch(&mut net, &mut ctx, Algorithm::Cd { k }, 0).unwrap();
    assert!((step.loss - oracle.loss).abs() < 1e-12);
    let gw = to_rows(net.params().get("hid/W").unwrap().grad());
    for i in 0..3 {
        for j in 0..2 {
            assert!((gw[i][j] - oracle.dw[i][j]).abs() < 1e-12, "dW[{i}][{j}]");
        }
    }
    let ga = net.params().get(&vis_bias).unwrap().grad().data().to_vec();
    let gc = net.params().get("hid/b").unwrap().grad().data().to_vec();
    for (x, y) in ga.iter().zip(&oracle.da).chain(gc.iter().zip(&oracle.dc)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn cd1_gradient_matches_oracle_on_a_fixed_tape() {
    check_cd(1, vec![0.1, 0.9, 0.6, 0.3]);
}

#[test]
fn cd2_resamples_between_steps() {
    check_cd(2, vec![0.1, 0.9, 0.6, 0.3, 0.5, 0.05, 0.95, 0.4]);
}

#[test]
fn cd_gradient_vanishes_at_a_fixed_point() {
    // With W = 0 and visible bias logit(v), the reconstruction equals the data.
    let v = [0.2, 0.7, 0.5];
    let mut net = build(&presets::rbm(3, 2), 2);
    net.set_batch(batch(&[&v, &v], &[0.0, 0.0]));
    let vis_bias = net.layer("vis").unwrap().params[1].clone();
    set(&mut net, "hid/W", Blob::zeros(3, 2));
    set(&mut net, &vis_bias, Blob::row_vector(v.iter().map(|p| (p / (1.0 - p)).ln()).collect()));
    let mut ctx = LocalContext::new(4);
    cd_train_one_batch(&mut net, &mut ctx, 1, 0).unwrap();
    for p in net.params().iter() {
        assert!(p.grad().data().iter().all(|g| g.abs() < 1e-12), "{} = {:?}", p.name(), p.grad());
    }
}

#[test]
fn cd_needs_rbm_layers_and_steps() {
    let mut mlp = build(&presets::mlp(2, &[2], 2), 1);
    mlp.set_batch(batch(&[&[0.0, 1.0]], &[0.0]));
    assert!(matches!(cd_train_one_batch(&mut mlp, &mut LocalContext::new(0), 1, 0), Err(Error::Config(_))));
    let mut rbm = build(&presets::rbm(2, 2), 1);
    rbm.set_batch(batch(&[&[0.0, 1.0]], &[0.0]));
    assert!(matches!(cd_train_one_batch(&mut rbm, &mut LocalContext::new(0), 0, 0), Err(Error::Config(_))));
}

fn rnn_batch() -> Batch {
    batch(&[&[0.0, 1.0, 2.0, 1.0], &[2.0, 2.0, 0.0, 1.0]], &[0.0, 0.0])
}

fn loss_of(net: &mut NeuralNet) -> f64 {
    let mut ctx = LocalContext::new(0);
    net.forward(Phase::Train, &mut ctx).unwrap();
    net.loss_value()
}

#[test]
fn bptt_gradients_match_finite_differences() {
    let mut net = build(&presets::char_rnn(3, 3, 3), 2);
    net.set_batch(rnn_batch());
    set(&mut net, "rnn/b", Blob::row_vector(vec![0.1, -0.3, 0.2]));
    let mut ctx = LocalContext::new(0);
    net.forward(Phase::Train, &mut ctx).unwrap();
    net.backward(&mut ctx).unwrap();
    let analytic = net.assembled_grads().unwrap();
    let h = 1e-6;
    for (name, grad) in &analytic {
        let base = net.params().value(name).unwrap().clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            set(&mut net, name, plus);
            let up = loss_of(&mut net);
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            set(&mut net, name, minus);
            let down = loss_of(&mut net);
            set(&mut net, name, base.clone());
            let numeric = (up - down) / (2.0 * h);
            let g = grad.data()[i];
            assert!((g - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()), "{name}[{i}]: {g} vs {numeric}");
        }
    }
    // The shared recurrent weight collects a gradient from every position.
    assert!(analytic["rnn/Wh"].data().iter().any(|g| g.abs() > 1e-8));
}

#[test]
fn single_step_unroll_is_plain_backprop() {
    let mut rnn = build(&presets::char_rnn(3, 2, 1), 2);
    let ff_cfg = NetConfig::new(vec![
        LayerDecl::new("data", LayerKind::Input { dim: 2 }, &[]),
        LayerDecl::new("onehot", LayerKind::OneHot { vocab: 3, column: 0 }, &["data"]),
        LayerDecl::new("next", LayerKind::Label { column: Some(1) }, &["data"]),
        LayerDecl::new("cell", LayerKind::InnerProduct { out: 2 }, &["onehot"]),
        LayerDecl::new("act", LayerKind::Tanh, &["cell"]),
        LayerDecl::new("out", LayerKind::InnerProduct { out: 3 }, &["act"]),
        LayerDecl::new("loss", LayerKind::SoftmaxLoss, &["out", "next"]),
    ]);
    let mut ff = build(&ff_cfg, 2);
    set(&mut ff, "cell/W", rnn.params().value("rnn/Wx").unwrap().clone());
    set(&mut ff, "out/W", rnn.params().value("out/W").unwrap().clone());
    let data = batch(&[&[0.0, 1.0], &[2.0, 0.0]], &[0.0, 0.0]);
    rnn.set_batch(data.clone());
    ff.set_batch(data);
    let a = bp_train_one_batch(&mut rnn, &mut LocalContext::new(0), 0).unwrap();
    let b = bp_train_one_batch(&mut ff, &mut LocalContext::new(0), 0).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    let (gr, gf) = (rnn.assembled_grads().unwrap(), ff.assembled_grads().unwrap());
    for (r, f) in [("rnn/Wx", "cell/W"), ("rnn/b", "cell/b"), ("out/W", "out/W"), ("out/b", "out/b")] {
        let diff = gr[r].sub(&gf[f]).unwrap();
        assert!(diff.data().iter().all(|d| d.abs() < 1e-12), "{r} vs {f}");
    }
    assert!(gr["rnn/Wh"].data().iter().all(|&g| g == 0.0));
}

#[test]
fn evaluation_is_pure_and_scores_perfect_predictions() {
    let mut net = build(&presets::mlp(2, &[], 2), 4);
    set(&mut net, "out/W", Blob::from_rows(&[&[10.0, -10.0], &[-10.0, 10.0]]));
    let data = Dataset::new(
        Blob::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.9, 0.1], &[0.2, 0.8], &[1.0, 0.0]]),
        Blob::from_vec(5, 1, vec![0.0, 1.0, 0.0, 1.0, 0.0]).unwrap(),
    )
    .unwrap();
    let before = net.params().values();
    let mut ctx = LocalContext::new(0);
    let first = evaluate(&mut net, &mut ctx, &data, 2).unwrap();
    let second = evaluate(&mut net, &mut ctx, &data, 3).unwrap();
    assert_eq!(net.params().values(), before);
    assert_eq!(first.accuracy, Some(1.0));
    assert_eq!(first.count, 5);
    assert!((first.loss - second.loss).abs() < 1e-12);
    // Oracle: mean softmax cross-entropy of the five logit rows.
    let expected: f64 = [(1.0, 0.0), (0.0, 1.0), (0.9, 0.1), (0.2, 0.8), (1.0, 0.0)]
        .iter()
        .zip([0, 1, 0, 1, 0])
        .map(|(&(x0, x1), label): (&(f64, f64), usize)| {
            let z = [10.0 * x0 - 10.0 * x1, -10.0 * x0 + 10.0 * x1];
            let lse = (z[0].exp() + z[1].exp()).ln();
            lse - z[label]
        })
        .sum::<f64>()
        / 5.0;
    assert!((first.loss - expected).abs() < 1e-12);

    let empty = Dataset::new(Blob::zeros(0, 2), Blob::zeros(0, 1)).unwrap();
    assert!(matches!(evaluate(&mut net, &mut ctx, &empty, 2), Err(Error::Evaluation(_))));
}

#[test]
fn divergence_is_reported_with_its_iteration() {
    let mut net = build(&linear_net(), 1);
    net.set_batch(batch(&[&[1e200, 1e200]], &[0.0]));
    set(&mut net, "out/W", Blob::from_rows(&[&[1e200], &[1e200]]));
    let err = train_one_batch(&mut net, &mut LocalContext::new(0), Algorithm::Bp, 17).unwrap_err();
    assert!(matches!(err, Error::Diverged { iteration: 17, .. }), "{err:?}");
}
