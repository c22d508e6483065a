//! Structured width pruning of attention heads and FFN channels by
//! first-order Taylor importance, plus the iterative schedule that takes a
//! multi-exit model down to a goal shape.
//!
//! The importance of a structure `S` is `|Σ_{w∈S} (∂L/∂w)·w|`, the magnitude
//! of the first-order change in `L` from zeroing `S`. `L` is the label
//! cross-entropy summed over every exit (exit-calibrated) or taken at the
//! final exit only. Batch gradients are weighted by batch share and summed
//! before the product is formed, so the score estimates the change of the
//! mean calibration loss.

mod schedule;

use serde::{Deserialize, Serialize};

pub use schedule::{
    planned_widths,
    slenderize, IterationReport, PruneMode, PruneSchedule, SlenderReport, SlenderizeOptions,
};

use crate::autodiff::Graph;
use crate::distill::label_node;
use crate::error::{Error, Result};
use crate::model::{Batch, BoundModel, ForwardOptions, LayerWeights, MultiExitModel};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureKind {
    AttentionHead,
    FfnChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StructureId {
    pub layer: usize,
    pub kind: StructureKind,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub structure: StructureId,
    pub importance: f64,
}

/// Which entries of a matrix belong to a structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Entries {
    Cols(std::ops::Range<usize>),
    Rows(std::ops::Range<usize>),
}

/// `Σ g·w` over the selected entries of one matrix.
pub fn taylor_term(w: &Matrix, g: &Matrix, entries: &Entries) -> f64 {
    assert_eq!(w.shape(), g.shape(), "weight and gradient shapes");
    let mut s = 0.0;
    match entries {
        Entries::Cols(cols) => {
            for r in 0..w.rows() {
                let (wr, gr) = (&w.row(r)[cols.clone()], &g.row(r)[cols.clone()]);
                s += wr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Entries::Rows(rows) => {
            for r in rows.clone() {
                s += w.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    s
}

/// The (matrix selector, entries) pairs that make up a structure.
fn structure_parts(
    kind: StructureKind,
    index: usize,
    head_size: usize,
) -> Vec<(fn(&LayerWeights<Matrix>) -> &Matrix, Entries)> {
    match kind {
        StructureKind::AttentionHead => {
            let cols = index * head_size..(index + 1) * head_size;
            vec![
                (|l| &l.wq, Entries::Cols(cols.clone())),
                (|l| &l.bq, Entries::Cols(cols.clone())),
                (|l| &l.wk, Entries::Cols(cols.clone())),
                (|l| &l.bk, Entries::Cols(cols.clone())),
                (|l| &l.wv, Entries::Cols(cols.clone())),
                (|l| &l.bv, Entries::Cols(cols.clone())),
                (|l| &l.wo, Entries::Rows(cols)),
            ]
        }
        StructureKind::FfnChannel => vec![
            (|l| &l.w_fi, Entries::Cols(index..index + 1)),
            (|l| &l.b_fi, Entries::Cols(index..index + 1)),
            (|l| &l.w_fo, Entries::Rows(index..index + 1)),
        ],
    }
}

/// Every live structure of `model`, in (layer, kind, index) order.
pub fn live_structures(model: &MultiExitModel) -> Vec<StructureId> {
    let mut out = Vec::new();
    for (layer, s) in model.layer_shapes().iter().enumerate() {
        for index in 0..s.num_heads {
            out.push(StructureId {
                layer,
                kind: StructureKind::AttentionHead,
                index,
            });
        }
        for index in 0..s.ffn_size {
            out.push(StructureId {
                layer,
                kind: StructureKind::FfnChannel,
                index,
            });
        }
    }
    out
}

/// Importance of every structure given per-layer weight gradients.
pub fn importance_from_grads(model: &MultiExitModel, grads: &[LayerWeights<Matrix>]) -> Vec<StructureScore> {
    let d = model.head_size();
    live_structures(model)
        .into_iter()
        .map(|s| {
            let (w, g) = (&model.weights.layers[s.layer], &grads[s.layer]);
            let sum: f64 = structure_parts(s.kind, s.index, d)
                .iter()
                .map(|(sel, e)| taylor_term(sel(w), sel(g), e))
                .sum();
            StructureScore {
                structure: s,
                importance: sum.abs(),
            }
        })
        .collect()
}

/// Scores every live head and FFN channel on labelled calibration data,
/// processed in batches of `batch_size`.
pub fn score_structures(
    model: &MultiExitModel,
    inputs: &[Vec<u32>],
    labels: &[usize],
    batch_size: usize,
    use_exit_losses: bool,
) -> Result<Vec<StructureScore>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    if inputs.len() != labels.len() || batch_size == 0 {
        return Err(Error::InvalidArgument(
            "calibration inputs/labels/batch size disagree".into(),
        ));
    }
    let layers = model.num_layers();
    let opts = if use_exit_losses {
        ForwardOptions::all_exits(layers)
    } else {
        ForwardOptions::final_exit(layers)
    };
    let mut grads: Option<Vec<LayerWeights<Matrix>>> = None;
    for (chunk, ys) in inputs.chunks(batch_size).zip(labels.chunks(batch_size)) {
        let batch = Batch::from_sequences(chunk)?;
        let mut g = Graph::new();
        let bound = BoundModel::bind_with(model, &mut g, |name| name.starts_with("layer."));
        let nodes = bound.forward(&mut g, &batch, &opts)?;
        let mut terms = Vec::new();
        for z in nodes.logits.iter().flatten() {
            terms.push(label_node(&mut g, *z, ys)?);
        }
        let total = g.add_all(&terms)?;
        let loss = g.scale(total, chunk.len() as f64 / inputs.len() as f64);
        g.backward(loss)?;
        let batch_grads: Vec<LayerWeights<Matrix>> = bound
            .weights
            .layers
            .iter()
            .map(|l| l.map(&mut |&n| g.take_grad(n)))
            .collect();
        match &mut grads {
            None => grads = Some(batch_grads),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&batch_grads) {
                    for (x, y) in a.fields_mut().into_iter().zip(b.fields()) {
                        x.add_assign(y);
                    }
                }
            }
        }
    }
    Ok(importance_from_grads(model, &grads.expect("non-empty")))
}

fn sorted_by_importance(scores: &[&StructureScore]) -> Vec<StructureScore> {
    let mut v: Vec<StructureScore> = scores.iter().map(|s| **s).collect();
    v.sort_by(|a, b| {
        a.importance
            .total_cmp(&b.importance)
            .then(a.structure.layer.cmp(&b.structure.layer))
            .then(a.structure.index.cmp(&b.structure.index))
    });
    v
}

/// The `drop` lowest-scoring structures of one kind, never taking a layer
/// below `min_survivors`.
pub(crate) fn drop_lowest(
    of_kind: &[&StructureScore],
    kind: StructureKind,
    drop: usize,
    min_survivors: usize,
) -> Result<Vec<StructureId>> {
    let mut alive = std::collections::BTreeMap::<usize, usize>::new();
    for s in of_kind {
        *alive.entry(s.structure.layer).or_default() += 1;
    }
    let capacity: usize = alive.values().map(|&n| n.saturating_sub(min_survivors)).sum();
    if capacity < drop {
        return Err(Error::InvalidArgument(format!(
            "cannot drop {drop} {kind:?} structures keeping {min_survivors} per layer"
        )));
    }
    let mut out = Vec::with_capacity(drop);
    for s in sorted_by_importance(of_kind) {
        if out.len() == drop {
            break;
        }
        let n = alive.get_mut(&s.structure.layer).expect("counted");
        if *n > min_survivors {
            *n -= 1;
            out.push(s.structure);
        }
    }
    Ok(out)
}

/// Globally lowest-scoring structures per kind: `⌊drop_fraction · n⌋` of the
/// `n` structures of each kind, never leaving a layer with fewer than
/// `min_survivors` of that kind. Ties go to the lower (layer, index).
pub fn select_prune_set(
    scores: &[StructureScore],
    drop_fraction: f64,
    min_survivors: usize,
) -> Result<Vec<StructureId>> {
    if !(drop_fraction > 0.0 && drop_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "drop fraction {drop_fraction} outside (0, 1)"
        )));
    }
    if min_survivors == 0 {
        return Err(Error::InvalidArgument("min_survivors must be >= 1".into()));
    }
    let mut out = Vec::new();
    for kind in [StructureKind::AttentionHead, StructureKind::FfnChannel] {
        let of_kind: Vec<&StructureScore> = scores.iter().filter(|s| s.structure.kind == kind).collect();
        if of_kind.is_empty() {
            continue;
        }
        let drop = (drop_fraction * of_kind.len() as f64).floor() as usize;
        out.extend(drop_lowest(&of_kind, kind, drop, min_survivors)?);
    }
    out.sort();
    Ok(out)
}

/// Per layer, the lowest-scoring structures beyond `keep[kind]` survivors.
pub fn select_per_layer(
    scores: &[StructureScore],
    keep_heads: usize,
    keep_channels: usize,
) -> Result<Vec<StructureId>> {
    if keep_heads == 0 || keep_channels == 0 {
        return Err(Error::InvalidArgument("every layer needs a survivor".into()));
    }
    let mut groups = std::collections::BTreeMap::<(usize, StructureKind), Vec<&StructureScore>>::new();
    for s in scores {
        groups.entry((s.structure.layer, s.structure.kind)).or_default().push(s);
    }
    let mut out = Vec::new();
    for ((_, kind), group) in groups {
        let keep = match kind {
            StructureKind::AttentionHead => keep_heads,
            StructureKind::FfnChannel => keep_channels,
        };
        let drop = group.len().saturating_sub(keep);
        out.extend(sorted_by_importance(&group).iter().take(drop).map(|s| s.structure));
    }
    out.sort();
    Ok(out)
}

/// Physically removes the listed structures. Hidden size and exit heads are
/// untouched.
pub fn apply_prune(model: &MultiExitModel, prune: &[StructureId]) -> Result<MultiExitModel> {
    let shapes = model.layer_shapes();
    let d = model.head_size();
    let mut weights = model.weights.clone();
    for (layer, shape) in shapes.iter().enumerate() {
        let dropped = |kind: StructureKind| -> std::collections::BTreeSet<usize> {
            prune
                .iter()
                .filter(|s| s.layer == layer && s.kind == kind)
                .map(|s| s.index)
                .collect()
        };
        let heads = dropped(StructureKind::AttentionHead);
        let channels = dropped(StructureKind::FfnChannel);
        if heads.is_empty() && channels.is_empty() {
            continue;
        }
        if heads.iter().any(|&h| h >= shape.num_heads) || channels.iter().any(|&c| c >= shape.ffn_size) {
            return Err(Error::InvalidArgument(format!(
                "prune set names a structure past layer {layer}'s widths"
            )));
        }
        if heads.len() == shape.num_heads || channels.len() == shape.ffn_size {
            return Err(Error::InvalidArgument(format!(
                "pruning would leave layer {layer} without heads or channels"
            )));
        }
        let l = &mut weights.layers[layer];
        if !heads.is_empty() {
            let cols: Vec<usize> = (0..shape.num_heads)
                .filter(|h| !heads.contains(h))
                .flat_map(|h| h * d..(h + 1) * d)
                .collect();
            for m in [&mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk, &mut l.wv, &mut l.bv] {
                *m = m.select_cols(&cols);
            }
            l.wo = l.wo.select_rows(&cols);
        }
        if !channels.is_empty() {
            let keep: Vec<usize> = (0..shape.ffn_size).filter(|c| !channels.contains(c)).collect();
            l.w_fi = l.w_fi.select_cols(&keep);
            l.b_fi = l.b_fi.select_cols(&keep);
            l.w_fo = l.w_fo.select_rows(&keep);
        }
    }
    MultiExitModel::from_parts(model.config().clone(), weights)
}

/// Zeroes the listed structures in place, keeping shapes (the masked
/// reference for [`apply_prune`]).
pub fn zero_structures(model: &MultiExitModel, structures: &[StructureId]) -> MultiExitModel {
    let mut out = model.clone();
    let d = model.head_size();
    for s in structures {
        let l = &mut out.weights.layers[s.layer];
        match s.kind {
            StructureKind::AttentionHead => {
                let cols = s.index * d..(s.index + 1) * d;
                for m in [&mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk, &mut l.wv, &mut l.bv] {
                    for r in 0..m.rows() {
                        m.row_mut(r)[cols.clone()].fill(0.0);
                    }
                }
                for r in cols {
                    l.wo.row_mut(r).fill(0.0);
                }
            }
            StructureKind::FfnChannel => {
                for r in 0..l.w_fi.rows() {
                    l.w_fi[(r, s.index)] = 0.0;
                }
                l.b_fi[(0, s.index)] = 0.0;
                l.w_fo.row_mut(s.index).fill(0.0);
            }
        }
    }
    out
}
