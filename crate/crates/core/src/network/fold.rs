use std::collections::HashSet;

use super::graph::{slot_name, LayerKind, NetworkGraph, NodeId, SlotRole};
use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Fuses every conv followed by a batch norm into a single biased conv.
///
/// Batch norms whose input is not a conv read only by that batch norm stay
/// in the graph and a warning is logged. Arithmetic is done in f64.
pub fn fold_batch_norm<T: Element>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
) -> Result<(NetworkGraph, WeightStore<T>)> {
    weights.check(graph)?;
    let consumers = graph.consumers();
    let pinned: HashSet<NodeId> = graph
        .outputs
        .iter()
        .chain(&graph.taps)
        .chain(&graph.hints)
        .chain(&graph.blocks)
        .copied()
        .collect();

    let n = graph.layers.len();
    let mut fold_into: Vec<Option<usize>> = vec![None; n];
    for (i, l) in graph.layers.iter().enumerate() {
        if !matches!(l.kind, LayerKind::BatchNorm { .. }) {
            continue;
        }
        let p = l.inputs[0];
        let foldable = matches!(graph.layers[p.0].kind, LayerKind::Conv { .. })
            && consumers[p.0].len() == 1
            && !pinned.contains(&p);
        if foldable {
            fold_into[i] = Some(p.0);
        } else {
            log::warn!("batch norm `{}` has no foldable preceding conv; left unfused", l.name);
        }
    }

    let mut out = weights.clone();
    let mut layers = Vec::with_capacity(n);
    let mut remap = vec![NodeId(0); n];
    let mut position = vec![0usize; n];
    for (i, l) in graph.layers.iter().enumerate() {
        if let Some(conv) = fold_into[i] {
            remap[i] = remap[conv];
            let eps = match l.kind {
                LayerKind::BatchNorm { eps } => eps,
                _ => unreachable!(),
            };
            let conv_layer: &mut super::graph::LayerSpec = &mut layers[position[conv]];
            fold_pair(&mut out, &conv_layer.name, &l.name, eps, conv_layer.channels)?;
            if let LayerKind::Conv { bias, .. } = &mut conv_layer.kind {
                *bias = true;
            }
            conv_layer.tap |= l.tap;
            continue;
        }
        let mut spec = l.clone();
        for input in &mut spec.inputs {
            *input = remap[input.0];
        }
        if let LayerKind::Resize { like, .. } = &mut spec.kind {
            *like = remap[like.0];
        }
        position[i] = layers.len();
        remap[i] = NodeId(layers.len());
        layers.push(spec);
    }
    let map = |v: &[NodeId]| v.iter().map(|id| remap[id.0]).collect::<Vec<_>>();
    let folded = NetworkGraph {
        layers,
        inputs: map(&graph.inputs),
        outputs: map(&graph.outputs),
        taps: map(&graph.taps),
        blocks: map(&graph.blocks),
        hints: map(&graph.hints),
        variant: graph.variant,
    };
    folded.validate()?;
    Ok((folded, out))
}

fn fold_pair<T: Element>(store: &mut WeightStore<T>, conv: &str, bn: &str, eps: f64, channels: usize) -> Result<()> {
    let get = |store: &WeightStore<T>, role| -> Result<Vec<f64>> {
        Ok(store.get(&slot_name(bn, role))?.data().iter().map(|v| v.f64()).collect())
    };
    let gamma = get(store, SlotRole::Gamma)?;
    let beta = get(store, SlotRole::Beta)?;
    let mean = get(store, SlotRole::RunningMean)?;
    let var = get(store, SlotRole::RunningVar)?;
    let mut scale = Vec::with_capacity(channels);
    for (c, (&g, &v)) in gamma.iter().zip(&var).enumerate() {
        if !(v + eps > 0.0) {
            return Err(Error::numeric(format!("{bn}: var + eps <= 0 at channel {c}")));
        }
        scale.push(g / (v + eps).sqrt());
    }
    let wname = slot_name(conv, SlotRole::Weight);
    let bname = slot_name(conv, SlotRole::Bias);
    let w = store.get_mut(&wname)?;
    let per = w.numel() / channels;
    for (o, chunk) in w.data_mut().chunks_mut(per).enumerate() {
        for v in chunk {
            *v = T::of(v.f64() * scale[o]);
        }
    }
    let old_bias: Vec<f64> = match store.get(&bname) {
        Ok(b) => b.data().iter().map(|v| v.f64()).collect(),
        Err(_) => vec![0.0; channels],
    };
    let bias: Vec<T> = (0..channels)
        .map(|o| T::of((old_bias[o] - mean[o]) * scale[o] + beta[o]))
        .collect();
    store.insert(bname, Tensor::from_vec(Shape::vector(channels), bias)?);
    for role in [SlotRole::Gamma, SlotRole::Beta, SlotRole::RunningMean, SlotRole::RunningVar] {
        store.remove(&slot_name(bn, role));
    }
    Ok(())
}
