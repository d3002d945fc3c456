use super::{Batch, Cache, Flow, Layer, LayerEnv, LayerKind, LossStats, ParamTable, Phase};
use crate::error::{Error, Result};
use crate::rng::bernoulli;
use crate::tensor::{concat_refs, gemm, split_range, Blob, Dim};

const PROB_FLOOR: f64 = 1e-300;

fn src<'a>(layer: &Layer, srcs: &[&'a Blob], i: usize) -> Result<&'a Blob> {
    srcs.get(i)
        .copied()
        .ok_or_else(|| Error::sequencing(&layer.name, format!("source {i} is not populated")))
}

fn param<'a>(layer: &Layer, params: &'a ParamTable, i: usize) -> Result<&'a Blob> {
    params.value(&layer.params[i])
}

fn row_piece(layer: &Layer, full: &Blob) -> Result<Blob> {
    match &layer.part {
        Some(p) if p.dim == Dim::Rows => {
            let (start, len) = split_range(full.rows(), p.parts, p.index)?;
            Ok(full.rows_range(start, len))
        }
        _ => Ok(full.clone()),
    }
}

fn symbol(layer: &Layer, v: f64, limit: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= limit {
        return Err(Error::config(format!(
            "layer `{}`: symbol {v} outside [0, {limit})",
            layer.name
        )));
    }
    Ok(v as usize)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(super) fn forward(
    layer: &mut Layer,
    phase: Phase,
    srcs: &[&Blob],
    params: &ParamTable,
    batch: Option<&Batch>,
    env: &mut dyn LayerEnv,
) -> Result<Blob> {
    let kind = layer.kind.clone();
    let out = match kind {
        LayerKind::Input { dim } => {
            let batch = batch.ok_or_else(|| Error::sequencing(&layer.name, "no mini-batch is bound"))?;
            if batch.features.cols() != dim {
                return Err(Error::config(format!(
                    "layer `{}` expects {dim} features, batch has {}",
                    layer.name,
                    batch.features.cols()
                )));
            }
            row_piece(layer, &batch.features)?
        }
        LayerKind::Label { column: None } => {
            let batch = batch.ok_or_else(|| Error::sequencing(&layer.name, "no mini-batch is bound"))?;
            row_piece(layer, &batch.labels)?
        }
        LayerKind::Label { column: Some(c) } => src(layer, srcs, 0)?.cols_range(c, 1),
        LayerKind::OneHot { vocab, column } => {
            let x = src(layer, srcs, 0)?;
            let mut out = Blob::zeros(x.rows(), vocab);
            for r in 0..x.rows() {
                let s = symbol(layer, x.get(r, column), vocab)?;
                out.set(r, s, 1.0);
            }
            out
        }
        LayerKind::InnerProduct { .. } => {
            let x = src(layer, srcs, 0)?;
            gemm(x, param(layer, params, 0)?, false, false)?.add_row(param(layer, params, 1)?)?
        }
        LayerKind::Sigmoid => src(layer, srcs, 0)?.sigmoid(),
        LayerKind::Tanh => src(layer, srcs, 0)?.tanh(),
        LayerKind::Relu => src(layer, srcs, 0)?.relu(),
        LayerKind::SoftmaxLoss => {
            let scores = src(layer, srcs, 0)?;
            let labels_blob = src(layer, srcs, 1)?;
            let probs = scores.softmax_rows()?;
            let mut stats = LossStats {
                has_accuracy: true,
                count: scores.rows(),
                ..LossStats::default()
            };
            let mut labels = Vec::with_capacity(scores.rows());
            for r in 0..scores.rows() {
                let y = symbol(layer, labels_blob.get(r, 0), scores.cols())?;
                stats.loss_sum -= probs.get(r, y).max(PROB_FLOOR).ln();
                if argmax(scores.row(r)) == y {
                    stats.correct += 1;
                }
                labels.push(y);
            }
            layer.cache = Cache::Softmax { probs, labels };
            layer.stats = Some(stats);
            Blob::filled(1, 1, stats.loss_sum / layer.norm)
        }
        LayerKind::EuclideanLoss => {
            let diff = src(layer, srcs, 0)?.sub(src(layer, srcs, 1)?)?;
            let loss_sum = 0.5 * diff.data().iter().map(|d| d * d).sum::<f64>();
            layer.stats = Some(LossStats {
                loss_sum,
                count: diff.rows(),
                ..LossStats::default()
            });
            layer.cache = Cache::Euclid { diff };
            Blob::filled(1, 1, loss_sum / layer.norm)
        }
        LayerKind::RbmVis => {
            layer.cache = Cache::RbmVis { recon: None };
            layer.stats = Some(LossStats::default());
            src(layer, srcs, 0)?.clone()
        }
        LayerKind::RbmHid { .. } => {
            let v = src(layer, srcs, 0)?;
            let prob = gemm(v, param(layer, params, 0)?, false, false)?
                .add_row(param(layer, params, 1)?)?
                .sigmoid();
            let sample = match phase {
                Phase::Train => bernoulli(&prob, env.rng()),
                Phase::Test => prob.clone(),
            };
            layer.cache = Cache::RbmHid {
                sample,
                neg_prob: None,
                neg_vis: None,
            };
            prob
        }
        LayerKind::Recurrent { .. } => {
            let x = src(layer, srcs, 0)?;
            let mut pre = gemm(x, param(layer, params, 0)?, false, false)?;
            if srcs.len() > 1 {
                pre.add_assign(&gemm(srcs[1], param(layer, params, 1)?, false, false)?)?;
            }
            pre.add_row(param(layer, params, 2)?)?.tanh()
        }
        LayerKind::BridgeSrc { id } => {
            let x = src(layer, srcs, 0)?.clone();
            env.bridge_send(id, Flow::Forward, x.clone())?;
            x
        }
        LayerKind::BridgeDst { id } => env.bridge_recv(id, Flow::Forward)?,
        LayerKind::Slice { dim, parts, index } => {
            let x = src(layer, srcs, 0)?;
            match dim {
                Dim::Rows => {
                    let (s, n) = split_range(x.rows(), parts, index)?;
                    x.rows_range(s, n)
                }
                Dim::Cols => {
                    let (s, n) = split_range(x.cols(), parts, index)?;
                    x.cols_range(s, n)
                }
            }
        }
        LayerKind::Concat { dim } => {
            let sizes = srcs
                .iter()
                .map(|b| if dim == Dim::Rows { b.rows() } else { b.cols() })
                .collect();
            layer.cache = Cache::Concat { sizes };
            concat_refs(srcs, dim)?
        }
        LayerKind::Split => src(layer, srcs, 0)?.clone(),
    };
    Ok(out)
}

fn need_grad<'a>(layer: &Layer, grad: Option<&'a Blob>, data: &Blob) -> Result<&'a Blob> {
    let g = grad.ok_or_else(|| Error::sequencing(&layer.name, "missing downstream gradient"))?;
    if g.shape() != data.shape() {
        return Err(Error::Dimension {
            op: "gradient",
            lhs: data.shape(),
            rhs: g.shape(),
        });
    }
    Ok(g)
}

fn accumulate(layer: &Layer, params: &mut ParamTable, i: usize, g: &Blob) -> Result<()> {
    params.get_mut(&layer.params[i])?.accumulate_grad(g)
}

pub(super) fn backward(
    layer: &mut Layer,
    srcs: &[&Blob],
    data: &Blob,
    grad: Option<&Blob>,
    wants: &[bool],
    params: &mut ParamTable,
    env: &mut dyn LayerEnv,
) -> Result<Vec<Option<Blob>>> {
    let want = |i: usize| wants.get(i).copied().unwrap_or(false);
    let kind = layer.kind.clone();
    let grads = match kind {
        LayerKind::Input { .. } | LayerKind::Label { .. } | LayerKind::OneHot { .. } => {
            vec![None; srcs.len()]
        }
        LayerKind::InnerProduct { .. } => {
            let dy = need_grad(layer, grad, data)?;
            let x = src(layer, srcs, 0)?;
            let dw = gemm(x, dy, true, false)?;
            accumulate(layer, params, 0, &dw)?;
            accumulate(layer, params, 1, &dy.col_sum())?;
            let dx = if want(0) {
                Some(gemm(dy, param(layer, params, 0)?, false, true)?)
            } else {
                None
            };
            vec![dx]
        }
        LayerKind::Sigmoid => {
            let dy = need_grad(layer, grad, data)?;
            vec![Some(dy.hadamard(&data.map(|y| y * (1.0 - y)))?)]
        }
        LayerKind::Tanh => {
            let dy = need_grad(layer, grad, data)?;
            vec![Some(dy.hadamard(&data.map(|y| 1.0 - y * y))?)]
        }
        LayerKind::Relu => {
            let dy = need_grad(layer, grad, data)?;
            vec![Some(dy.hadamard(&data.map(|y| if y > 0.0 { 1.0 } else { 0.0 }))?)]
        }
        LayerKind::SoftmaxLoss => {
            let Cache::Softmax { probs, labels } = &layer.cache else {
                return Err(Error::sequencing(&layer.name, "forward pass has not run"));
            };
            let mut d = probs.clone();
            for (r, &y) in labels.iter().enumerate() {
                d.set(r, y, d.get(r, y) - 1.0);
            }
            vec![want(0).then(|| d.scale(1.0 / layer.norm)).transpose()?, None]
        }
        LayerKind::EuclideanLoss => {
            let Cache::Euclid { diff } = &layer.cache else {
                return Err(Error::sequencing(&layer.name, "forward pass has not run"));
            };
            let g = diff.scale(1.0 / layer.norm)?;
            let neg = if want(1) { Some(g.scale(-1.0)?) } else { None };
            vec![want(0).then_some(g), neg]
        }
        LayerKind::RbmVis => {
            let recon = layer.rbm_reconstruction()?;
            let da = data.sub(recon)?.col_sum().scale(-1.0 / layer.norm)?;
            accumulate(layer, params, 1, &da)?;
            vec![None]
        }
        LayerKind::RbmHid { .. } => {
            let Cache::RbmHid {
                neg_prob: Some(neg),
                neg_vis: Some(v_neg),
                ..
            } = &layer.cache
            else {
                return Err(Error::sequencing(&layer.name, "negative phase has not run"));
            };
            let v = src(layer, srcs, 0)?;
            let positive = gemm(v, data, true, false)?;
            let negative = gemm(v_neg, neg, true, false)?;
            let dw = negative.sub(&positive)?.scale(1.0 / layer.norm)?;
            let dc = neg.sub(data)?.col_sum().scale(1.0 / layer.norm)?;
            accumulate(layer, params, 0, &dw)?;
            accumulate(layer, params, 1, &dc)?;
            vec![None]
        }
        LayerKind::Recurrent { .. } => {
            let dy = need_grad(layer, grad, data)?;
            let dpre = dy.hadamard(&data.map(|h| 1.0 - h * h))?;
            let x = src(layer, srcs, 0)?;
            accumulate(layer, params, 0, &gemm(x, &dpre, true, false)?)?;
            let mut out = vec![None; srcs.len()];
            if srcs.len() > 1 {
                accumulate(layer, params, 1, &gemm(srcs[1], &dpre, true, false)?)?;
                if want(1) {
                    out[1] = Some(gemm(&dpre, param(layer, params, 1)?, false, true)?);
                }
            }
            accumulate(layer, params, 2, &dpre.col_sum())?;
            if want(0) {
                out[0] = Some(gemm(&dpre, param(layer, params, 0)?, false, true)?);
            }
            out
        }
        LayerKind::BridgeSrc { id } => {
            let g = env.bridge_recv(id, Flow::Backward)?;
            vec![Some(g)]
        }
        LayerKind::BridgeDst { id } => {
            let dy = need_grad(layer, grad, data)?;
            env.bridge_send(id, Flow::Backward, dy.clone())?;
            vec![None; srcs.len()]
        }
        LayerKind::Slice { dim, parts, index } => {
            let dy = need_grad(layer, grad, data)?;
            let x = src(layer, srcs, 0)?;
            let mut full = Blob::zeros(x.rows(), x.cols());
            match dim {
                Dim::Rows => {
                    let (s, _) = split_range(x.rows(), parts, index)?;
                    for r in 0..dy.rows() {
                        for c in 0..dy.cols() {
                            full.set(s + r, c, dy.get(r, c));
                        }
                    }
                }
                Dim::Cols => {
                    let (s, _) = split_range(x.cols(), parts, index)?;
                    for r in 0..dy.rows() {
                        for c in 0..dy.cols() {
                            full.set(r, s + c, dy.get(r, c));
                        }
                    }
                }
            }
            vec![Some(full)]
        }
        LayerKind::Concat { dim } => {
            let dy = need_grad(layer, grad, data)?;
            let Cache::Concat { sizes } = &layer.cache else {
                return Err(Error::sequencing(&layer.name, "forward pass has not run"));
            };
            let mut start = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for (i, &n) in sizes.iter().enumerate() {
                out.push(want(i).then(|| match dim {
                    Dim::Rows => dy.rows_range(start, n),
                    Dim::Cols => dy.cols_range(start, n),
                }));
                start += n;
            }
            out
        }
        LayerKind::Split => vec![Some(need_grad(layer, grad, data)?.clone())],
    };
    Ok(grads)
}

pub(super) fn rbm_reconstruct(layer: &mut Layer, visible: &Blob, hidden: &Blob, params: &ParamTable) -> Result<()> {
    if !matches!(layer.kind, LayerKind::RbmVis) {
        return Err(Error::config(format!("layer `{}` is not an RBM visible layer", layer.name)));
    }
    let recon = gemm(hidden, param(layer, params, 0)?, false, true)?
        .add_row(param(layer, params, 1)?)?
        .sigmoid();
    let first = matches!(layer.cache, Cache::RbmVis { recon: None });
    if first {
        layer.stats = Some(LossStats {
            loss_sum: cross_entropy_sum(visible, &recon),
            count: visible.rows(),
            ..LossStats::default()
        });
    }
    layer.cache = Cache::RbmVis { recon: Some(recon) };
    Ok(())
}

pub(super) fn rbm_negative(
    layer: &mut Layer,
    recon: &Blob,
    params: &ParamTable,
    last_step: bool,
    env: &mut dyn LayerEnv,
) -> Result<()> {
    let Cache::RbmHid { sample, .. } = &layer.cache else {
        return Err(Error::sequencing(&layer.name, "positive phase has not run"));
    };
    let neg = gemm(recon, param(layer, params, 0)?, false, false)?
        .add_row(param(layer, params, 1)?)?
        .sigmoid();
    let sample = if last_step {
        sample.clone()
    } else {
        bernoulli(&neg, env.rng())
    };
    layer.cache = Cache::RbmHid {
        sample,
        neg_prob: Some(neg),
        neg_vis: Some(recon.clone()),
    };
    Ok(())
}

fn cross_entropy_sum(v: &Blob, r: &Blob) -> f64 {
    v.data()
        .iter()
        .zip(r.data())
        .map(|(&x, &p)| {
            -(x * p.max(PROB_FLOOR).ln() + (1.0 - x) * (1.0 - p).max(PROB_FLOOR).ln())
        })
        .sum()
}

/// Mean per-example cross-entropy of the deterministic reconstruction
/// `sigmoid(sigmoid(vW + c) Wᵀ + a)` of visible rows `v`.
pub fn reconstruction_cross_entropy(v: &Blob, w: &Blob, vis_bias: &Blob, hid_bias: &Blob) -> Result<f64> {
    let h = gemm(v, w, false, false)?.add_row(hid_bias)?.sigmoid();
    let r = gemm(&h, w, false, true)?.add_row(vis_bias)?.sigmoid();
    Ok(cross_entropy_sum(v, &r) / v.rows().max(1) as f64)
}
