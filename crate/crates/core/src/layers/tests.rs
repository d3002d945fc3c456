use std::collections::HashMap;

use super::*;
use crate::rng::{Tape, UnitRng};
use crate::tensor::Blob;

#[derive(Default)]
struct Loopback {
    queues: HashMap<(u32, Flow), Vec<Blob>>,
    rng: Option<UnitRng>,
}

impl LayerEnv for Loopback {
    fn bridge_send(&mut self, id: u32, flow: Flow, blob: Blob) -> Result<()> {
        self.queues.entry((id, flow)).or_default().push(blob);
        Ok(())
    }

    fn bridge_recv(&mut self, id: u32, flow: Flow) -> Result<Blob> {
        self.queues
            .get_mut(&(id, flow))
            .and_then(|q| (!q.is_empty()).then(|| q.remove(0)))
            .ok_or_else(|| Error::protocol("nothing sent"))
    }

    fn rng(&mut self) -> &mut dyn UniformSource {
        self.rng.get_or_insert_with(|| UnitRng::new(1))
    }
}

fn def(name: &str, kind: LayerKind) -> LayerDef {
    LayerDef {
        name: name.into(),
        kind,
        location: 0,
        part: None,
        param_prefix: name.into(),
    }
}

fn setup(d: &LayerDef, batch: usize, shapes: &[(usize, usize)]) -> (Layer, ParamTable) {
    let (layer, specs) = Layer::setup(
        d,
        SetupCtx {
            batch,
            src_shapes: shapes,
            rbm_partner: None,
        },
    )
    .unwrap();
    let mut table = ParamTable::default();
    for s in specs {
        let v = s.initial_value(11);
        table.insert(Param::new(s, v).unwrap());
    }
    (layer, table)
}

fn blob(rows: usize, cols: usize, seed: f64) -> Blob {
    Blob::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Objective `Σ y ⊙ r` so the gradient of the output is `r`.
fn weighted_sum(y: &Blob, r: &Blob) -> f64 {
    y.hadamard(r).unwrap().sum()
}

#[test]
fn setup_shapes() {
    let (ip, table) = setup(&def("fc", LayerKind::InnerProduct { out: 32 }), 8, &[(8, 784)]);
    assert_eq!(ip.shape, (8, 32));
    assert_eq!(table.get("fc/W").unwrap().value().shape(), (784, 32));
    assert_eq!(table.get("fc/b").unwrap().value().shape(), (1, 32));

    let (loss, _) = setup(&def("loss", LayerKind::SoftmaxLoss), 8, &[(8, 10), (8, 1)]);
    assert_eq!(loss.shape, (1, 1));

    let (cat, _) = setup(&def("cat", LayerKind::Concat { dim: Dim::Cols }), 8, &[(8, 25), (8, 25)]);
    assert_eq!(cat.shape, (8, 50));

    let err = Layer::setup(
        &def("fc", LayerKind::InnerProduct { out: 2 }),
        SetupCtx {
            batch: 1,
            src_shapes: &[],
            rbm_partner: None,
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("`fc`"), "{err}");
}

#[test]
fn inner_product_hand_case() {
    let (mut ip, mut table) = setup(&def("fc", LayerKind::InnerProduct { out: 1 }), 1, &[(1, 2)]);
    table.get_mut("fc/W").unwrap().refresh(Blob::from_rows(&[&[2.0], &[3.0]]), 0).unwrap();
    let x = Blob::from_rows(&[&[1.0, 0.0]]);
    let y = ip.compute_feature(Phase::Train, &[&x], &table, None, &mut Loopback::default()).unwrap();
    assert_eq!(y.data(), &[2.0]);
}

#[test]
fn sigmoid_forward_and_backward() {
    let (mut s, mut table) = setup(&def("s", LayerKind::Sigmoid), 1, &[(1, 1)]);
    let x = Blob::zeros(1, 1);
    let env = &mut Loopback::default();
    let y = s.compute_feature(Phase::Train, &[&x], &table, None, env).unwrap();
    assert_eq!(y.data(), &[0.5]);
    let g = s
        .compute_gradient(&[&x], &y, Some(&Blob::filled(1, 1, 1.0)), &[true], &mut table, env)
        .unwrap();
    assert_eq!(g[0].as_ref().unwrap().data(), &[0.25]);
}

#[test]
fn softmax_loss_gradient_is_p_minus_onehot() {
    let (mut l, mut table) = setup(&def("loss", LayerKind::SoftmaxLoss), 1, &[(1, 3), (1, 1)]);
    let scores = Blob::zeros(1, 3);
    let labels = Blob::zeros(1, 1);
    let env = &mut Loopback::default();
    let y = l.compute_feature(Phase::Train, &[&scores, &labels], &table, None, env).unwrap();
    assert!((y.data()[0] - 3f64.ln()).abs() < 1e-15);
    let g = l.compute_gradient(&[&scores, &labels], &y, None, &[true, false], &mut table, env).unwrap();
    let d = g[0].as_ref().unwrap();
    let want = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
    for (a, b) in d.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(g[1].is_none());
}

#[test]
fn missing_downstream_gradient_is_a_sequencing_error() {
    let (mut s, mut table) = setup(&def("s", LayerKind::Tanh), 1, &[(1, 1)]);
    let x = Blob::zeros(1, 1);
    let env = &mut Loopback::default();
    let y = s.compute_feature(Phase::Train, &[&x], &table, None, env).unwrap();
    let err = s.compute_gradient(&[&x], &y, None, &[true], &mut table, env).unwrap_err();
    assert!(matches!(err, Error::Sequencing { .. }));
}

fn fd_check_params(
    layer: &mut Layer,
    table: &mut ParamTable,
    srcs: &[Blob],
    objective: impl Fn(&mut Layer, &ParamTable, &[Blob]) -> f64,
    analytic: impl Fn(&mut Layer, &mut ParamTable, &[Blob]),
) {
    for p in table.iter_mut() {
        p.zero_grad();
    }
    analytic(layer, table, srcs);
    let names: Vec<String> = table.names().map(String::from).collect();
    let h = 1e-5;
    for name in names {
        let grad = table.get(&name).unwrap().grad().clone();
        let base = table.get(&name).unwrap().value().clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            table.get_mut(&name).unwrap().refresh(plus, 0).unwrap();
            let fp = objective(layer, table, srcs);
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            table.get_mut(&name).unwrap().refresh(minus, 0).unwrap();
            let fm = objective(layer, table, srcs);
            table.get_mut(&name).unwrap().refresh(base.clone(), 0).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(grad.data()[i], numeric);
            assert!(e < 1e-6, "{name}[{i}]: analytic {} numeric {numeric} rel {e}", grad.data()[i]);
        }
    }
}

#[test]
fn inner_product_matches_finite_differences() {
    let (mut ip, mut table) = setup(&def("fc", LayerKind::InnerProduct { out: 2 }), 4, &[(4, 3)]);
    table.get_mut("fc/b").unwrap().refresh(blob(1, 2, 0.7), 0).unwrap();
    let r = blob(4, 2, 1.9);
    let x = vec![blob(4, 3, 0.3)];
    let obj = |l: &mut Layer, t: &ParamTable, s: &[Blob]| {
        let y = l.compute_feature(Phase::Train, &[&s[0]], t, None, &mut Loopback::default()).unwrap();
        weighted_sum(&y, &r)
    };
    fd_check_params(&mut ip, &mut table, &x, obj, |l, t, s| {
        let env = &mut Loopback::default();
        let y = l.compute_feature(Phase::Train, &[&s[0]], t, None, env).unwrap();
        l.compute_gradient(&[&s[0]], &y, Some(&r), &[true], t, env).unwrap();
    });
}

#[test]
fn recurrent_cell_matches_finite_differences() {
    let (mut cell, mut table) = setup(&def("rnn", LayerKind::Recurrent { hidden: 3 }), 2, &[(2, 4), (2, 3)]);
    table.get_mut("rnn/b").unwrap().refresh(blob(1, 3, 0.4), 0).unwrap();
    let r = blob(2, 3, 2.3);
    let srcs = vec![blob(2, 4, 0.9), blob(2, 3, 0.5).map(|v| v * 0.5)];
    let obj = |l: &mut Layer, t: &ParamTable, s: &[Blob]| {
        let y = l.compute_feature(Phase::Train, &[&s[0], &s[1]], t, None, &mut Loopback::default()).unwrap();
        weighted_sum(&y, &r)
    };
    fd_check_params(&mut cell, &mut table, &srcs, obj, |l, t, s| {
        let env = &mut Loopback::default();
        let y = l.compute_feature(Phase::Train, &[&s[0], &s[1]], t, None, env).unwrap();
        l.compute_gradient(&[&s[0], &s[1]], &y, Some(&r), &[true, true], t, env).unwrap();
    });
}

#[test]
fn source_gradients_match_finite_differences() {
    // dx of inner product, recurrent and the activations
    let kinds = [
        (LayerKind::InnerProduct { out: 3 }, vec![(3, 4)]),
        (LayerKind::Recurrent { hidden: 2 }, vec![(3, 4), (3, 2)]),
        (LayerKind::Sigmoid, vec![(3, 4)]),
        (LayerKind::Tanh, vec![(3, 4)]),
        (LayerKind::Relu, vec![(3, 4)]),
        (LayerKind::EuclideanLoss, vec![(3, 4), (3, 4)]),
    ];
    for (kind, shapes) in kinds {
        let (mut layer, mut table) = setup(&def("l", kind.clone()), 3, &shapes);
        let srcs: Vec<Blob> = shapes.iter().enumerate().map(|(i, s)| blob(s.0, s.1, 0.37 + i as f64)).collect();
        let env = &mut Loopback::default();
        let refs: Vec<&Blob> = srcs.iter().collect();
        let y = layer.compute_feature(Phase::Train, &refs, &table, None, env).unwrap();
        let r = if kind.is_loss() { Blob::filled(1, 1, 1.0) } else { blob(y.rows(), y.cols(), 1.3) };
        let grad = (!kind.is_loss()).then_some(&r);
        let wants = vec![true; srcs.len()];
        let g = layer.compute_gradient(&refs, &y, grad, &wants, &mut table, env).unwrap();
        for (si, s) in srcs.iter().enumerate() {
            let analytic = g[si].as_ref().unwrap();
            for i in 0..s.len() {
                let eval = |delta: f64, layer: &mut Layer| {
                    let mut moved = srcs.clone();
                    moved[si].data_mut()[i] += delta;
                    let refs: Vec<&Blob> = moved.iter().collect();
                    let y = layer.compute_feature(Phase::Train, &refs, &table, None, &mut Loopback::default()).unwrap();
                    weighted_sum(&y, &r)
                };
                let numeric = (eval(1e-5, &mut layer) - eval(-1e-5, &mut layer)) / 2e-5;
                let e = rel_err(analytic.data()[i], numeric);
                assert!(e < 1e-6, "{} src {si}[{i}]: {} vs {numeric}", kind.type_name(), analytic.data()[i]);
            }
        }
    }
}

#[test]
fn rbm_gradient_vanishes_at_a_chain_fixed_point() {
    let vis_def = def("vis", LayerKind::RbmVis);
    let hid_def = def("hid", LayerKind::RbmHid { hidden: 3 });
    let (mut vis, vspecs) = Layer::setup(
        &vis_def,
        SetupCtx {
            batch: 4,
            src_shapes: &[(4, 6)],
            rbm_partner: Some(("hid", 3)),
        },
    )
    .unwrap();
    let (mut hid, mut table) = setup(&hid_def, 4, &[(4, 6)]);
    for s in vspecs {
        if !table.contains(&s.name) {
            table.insert(Param::new(s.clone(), s.initial_value(1)).unwrap());
        }
    }
    let pattern = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    // Zero weights and saturated visible biases reproduce the pattern exactly.
    table.get_mut("hid/W").unwrap().refresh(Blob::zeros(6, 3), 0).unwrap();
    let bias: Vec<f64> = pattern.iter().map(|&p| if p == 1.0 { 1000.0 } else { -1000.0 }).collect();
    table.get_mut("vis/b").unwrap().refresh(Blob::row_vector(bias), 0).unwrap();
    let rows: Vec<&[f64]> = vec![&pattern; 4];
    let v = Blob::from_rows(&rows);
    let mut env = Loopback::default();
    let data = vis.compute_feature(Phase::Train, &[&v], &table, None, &mut env).unwrap();
    let p = hid.compute_feature(Phase::Train, &[&data], &table, None, &mut env).unwrap();
    let h = hid.rbm_hidden_sample().unwrap().clone();
    vis.rbm_reconstruct(&data, &h, &table).unwrap();
    let recon = vis.rbm_reconstruction().unwrap().clone();
    assert_eq!(recon, v);
    hid.rbm_negative(&recon, &table, true, &mut env).unwrap();
    hid.compute_gradient(&[&data], &p, None, &[false], &mut table, &mut env).unwrap();
    vis.compute_gradient(&[&v], &data, None, &[false], &mut table, &mut env).unwrap();
    for name in ["hid/W", "hid/b", "vis/b"] {
        assert!(table.get(name).unwrap().grad().data().iter().all(|g| *g == 0.0), "{name}");
    }
}

#[test]
fn rbm_hidden_sampling_consumes_the_tape() {
    struct TapeEnv(Tape);
    impl LayerEnv for TapeEnv {
        fn bridge_send(&mut self, _: u32, _: Flow, _: Blob) -> Result<()> {
            unreachable!()
        }
        fn bridge_recv(&mut self, _: u32, _: Flow) -> Result<Blob> {
            unreachable!()
        }
        fn rng(&mut self) -> &mut dyn UniformSource {
            &mut self.0
        }
    }
    let (mut hid, table) = setup(&def("hid", LayerKind::RbmHid { hidden: 2 }), 1, &[(1, 2)]);
    let mut env = TapeEnv(Tape::new(vec![0.0, 0.999_999]));
    hid.compute_feature(Phase::Train, &[&Blob::zeros(1, 2)], &table, None, &mut env).unwrap();
    assert_eq!(hid.rbm_hidden_sample().unwrap().data(), &[1.0, 0.0]);
    assert_eq!(env.0.consumed(), 2);
}

#[test]
fn bridge_round_trip_is_bit_identical() {
    let (mut src, mut t) = setup(&def("bs", LayerKind::BridgeSrc { id: 4 }), 2, &[(2, 3)]);
    let (mut dst, _) = setup(&def("bd", LayerKind::BridgeDst { id: 4 }), 2, &[(2, 3)]);
    let x = blob(2, 3, 0.123);
    let mut env = Loopback::default();
    src.compute_feature(Phase::Train, &[&x], &t, None, &mut env).unwrap();
    let y = dst.compute_feature(Phase::Train, &[], &t, None, &mut env).unwrap();
    assert_eq!(y, x);
    let g = blob(2, 3, 7.7);
    dst.compute_gradient(&[], &y, Some(&g), &[], &mut t, &mut env).unwrap();
    let back = src.compute_gradient(&[&x], &x, None, &[true], &mut t, &mut env).unwrap();
    assert_eq!(back[0].as_ref().unwrap(), &g);
}

#[test]
fn one_hot_and_label_columns() {
    let (mut oh, t) = setup(&def("oh", LayerKind::OneHot { vocab: 3, column: 1 }), 2, &[(2, 4)]);
    let x = Blob::from_rows(&[&[0.0, 2.0, 1.0, 0.0], &[1.0, 0.0, 2.0, 1.0]]);
    let mut env = Loopback::default();
    let y = oh.compute_feature(Phase::Train, &[&x], &t, None, &mut env).unwrap();
    assert_eq!(y, Blob::from_rows(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]));
    let (mut lab, t) = setup(&def("lab", LayerKind::Label { column: Some(2) }), 2, &[(2, 4)]);
    let y = lab.compute_feature(Phase::Train, &[&x], &t, None, &mut env).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0]);
    let bad = Blob::from_rows(&[&[0.0, 5.0, 0.0, 0.0]]);
    assert!(oh.compute_feature(Phase::Train, &[&bad], &t, None, &mut env).is_err());
}

#[test]
fn split_sums_to_single_consumer_gradient() {
    // Split forward then the sum of identical consumer gradients equals
    // k times the single-consumer gradient, and slice/concat gradients
    // scatter back to the right places.
    let (mut split, mut t) = setup(&def("sp", LayerKind::Split), 2, &[(2, 2)]);
    let x = blob(2, 2, 0.5);
    let mut env = Loopback::default();
    let y = split.compute_feature(Phase::Train, &[&x], &t, None, &mut env).unwrap();
    assert_eq!(y, x);
    let g = blob(2, 2, 0.9);
    let total = g.add(&g).unwrap();
    let back = split.compute_gradient(&[&x], &y, Some(&total), &[true], &mut t, &mut env).unwrap();
    assert_eq!(back[0].as_ref().unwrap(), &g.scale(2.0).unwrap());

    let (mut sl, mut t) = setup(
        &def("sl", LayerKind::Slice { dim: Dim::Cols, parts: 2, index: 1 }),
        2,
        &[(2, 3)],
    );
    let x = blob(2, 3, 0.2);
    let y = sl.compute_feature(Phase::Train, &[&x], &t, None, &mut env).unwrap();
    assert_eq!(y, x.cols_range(2, 1));
    let back = sl.compute_gradient(&[&x], &y, Some(&Blob::filled(2, 1, 1.0)), &[true], &mut t, &mut env).unwrap();
    assert_eq!(back[0].as_ref().unwrap(), &Blob::from_rows(&[&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]]));
}
