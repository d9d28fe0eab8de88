//! Graph execution over interchangeable backends.

use std::collections::BTreeMap;

use super::graph::{slot_name, LayerKind, LayerSpec, NetworkGraph, NodeId, SlotRole};
use super::weights::WeightStore;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormTrain, BN_MOMENTUM};
use crate::tensor::{Element, Shape, Tensor};

/// Evaluates single layers. The executor handles ordering and liveness.
pub trait Backend<T: Element> {
    type Value;

    fn shape(&self, value: &Self::Value) -> Shape;

    /// `target` carries the output spatial size for resize layers.
    fn apply(&mut self, layer: &LayerSpec, inputs: &[&Self::Value], target: Option<(usize, usize)>) -> Result<Self::Value>;
}

/// Values retained after a run, indexed by node.
#[derive(Debug)]
pub struct Activations<V> {
    values: Vec<Option<V>>,
    shapes: Vec<Option<Shape>>,
}

impl<V> Activations<V> {
    pub fn get(&self, id: NodeId) -> Option<&V> {
        self.values[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<V> {
        self.values[id.0].take()
    }

    pub fn shape(&self, id: NodeId) -> Option<Shape> {
        self.shapes[id.0]
    }
}

impl NetworkGraph {
    /// Runs the layers needed for `keep`, freeing values after their last use.
    pub fn run<T: Element, B: Backend<T>>(
        &self,
        backend: &mut B,
        inputs: Vec<B::Value>,
        keep: &[NodeId],
    ) -> Result<Activations<B::Value>> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::contract(format!(
                "graph takes {} inputs, got {}",
                self.inputs.len(),
                inputs.len()
            )));
        }
        let n = self.layers.len();
        let mut needed = vec![false; n];
        let mut kept = vec![false; n];
        for k in keep {
            needed[k.0] = true;
            kept[k.0] = true;
        }
        for i in (0..n).rev() {
            if needed[i] {
                for input in &self.layers[i].inputs {
                    needed[input.0] = true;
                }
                if let LayerKind::Resize { like, .. } = self.layers[i].kind {
                    needed[like.0] = true;
                }
            }
        }
        let mut last_use = vec![0usize; n];
        for (i, l) in self.layers.iter().enumerate() {
            if needed[i] {
                for input in &l.inputs {
                    last_use[input.0] = i;
                }
            }
        }
        let mut values: Vec<Option<B::Value>> = (0..n).map(|_| None).collect();
        let mut shapes: Vec<Option<Shape>> = vec![None; n];
        let mut inputs: Vec<Option<B::Value>> = inputs.into_iter().map(Some).collect();
        for (i, l) in self.layers.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            let value = match l.kind {
                LayerKind::Input { index } => {
                    let v = inputs[index].take().expect("each input read once");
                    let s = backend.shape(&v);
                    if s.c != l.channels {
                        return Err(Error::Shape {
                            op: "input",
                            axis: "channels",
                            expected: l.channels,
                            got: s.c,
                        }
                        .in_layer(&l.name));
                    }
                    v
                }
                _ => {
                    let target = match l.kind {
                        LayerKind::Resize { like, factor } => {
                            let s = shapes[like.0].expect("like node computed");
                            Some((s.h * factor, s.w * factor))
                        }
                        _ => None,
                    };
                    let args: Vec<&B::Value> = l
                        .inputs
                        .iter()
                        .map(|id| values[id.0].as_ref().expect("input alive"))
                        .collect();
                    backend.apply(l, &args, target).map_err(|e| e.in_layer(&l.name))?
                }
            };
            shapes[i] = Some(backend.shape(&value));
            values[i] = Some(value);
            for input in &l.inputs {
                if last_use[input.0] == i && !kept[input.0] {
                    values[input.0] = None;
                }
            }
        }
        for (i, v) in values.iter_mut().enumerate() {
            if !kept[i] {
                *v = None;
            }
        }
        Ok(Activations { values, shapes })
    }

    /// Inference on the primary output.
    pub fn forward<T: Element>(&self, weights: &WeightStore<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut out = self.forward_nodes(weights, inputs, &[self.output()])?;
        Ok(out.pop().expect("one node requested"))
    }

    /// Inference returning the values of `nodes` in order.
    pub fn forward_nodes<T: Element>(
        &self,
        weights: &WeightStore<T>,
        inputs: &[&Tensor<T>],
        nodes: &[NodeId],
    ) -> Result<Vec<Tensor<T>>> {
        let mut backend = Inference::new(weights);
        let mut acts = self.run(&mut backend, inputs.iter().map(|t| (*t).clone()).collect(), nodes)?;
        Ok(nodes
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let v = if nodes[i + 1..].contains(id) {
                    acts.get(*id).cloned()
                } else {
                    acts.take(*id)
                };
                v.expect("kept node")
            })
            .collect())
    }
}

/// Plain tensor evaluation with batch norm in eval mode.
#[derive(Debug)]
pub struct Inference<'a, T> {
    weights: &'a WeightStore<T>,
}

impl<'a, T: Element> Inference<'a, T> {
    pub fn new(weights: &'a WeightStore<T>) -> Self {
        Self { weights }
    }
}

fn slot<'w, T: Element>(w: &'w WeightStore<T>, layer: &LayerSpec, role: SlotRole) -> Result<&'w Tensor<T>> {
    w.get(&slot_name(&layer.name, role))
}

impl<T: Element> Backend<T> for Inference<'_, T> {
    type Value = Tensor<T>;

    fn shape(&self, value: &Tensor<T>) -> Shape {
        value.shape()
    }

    fn apply(&mut self, layer: &LayerSpec, x: &[&Tensor<T>], target: Option<(usize, usize)>) -> Result<Tensor<T>> {
        let w = self.weights;
        match &layer.kind {
            LayerKind::Input { .. } => unreachable!("inputs are bound by the executor"),
            LayerKind::Conv { params, bias, .. } => {
                let b = if *bias { Some(slot(w, layer, SlotRole::Bias)?) } else { None };
                ops::conv2d(x[0], slot(w, layer, SlotRole::Weight)?, b, *params)
            }
            LayerKind::BatchNorm { eps } => ops::batch_norm_eval(
                x[0],
                slot(w, layer, SlotRole::Gamma)?,
                slot(w, layer, SlotRole::Beta)?,
                slot(w, layer, SlotRole::RunningMean)?,
                slot(w, layer, SlotRole::RunningVar)?,
                T::of(*eps),
            ),
            LayerKind::Relu6 => Ok(ops::relu6(x[0])),
            LayerKind::Sigmoid => Ok(ops::sigmoid(x[0])),
            LayerKind::SoftmaxSpatial => ops::softmax_spatial(x[0]),
            LayerKind::Resize { .. } => {
                let (h, w) = target.expect("resize target");
                ops::bilinear_resize(x[0], h, w)
            }
            LayerKind::AvgPool2 => ops::avg_pool2(x[0]),
            LayerKind::PixelShuffle { factor } => ops::pixel_shuffle(x[0], *factor),
            LayerKind::Concat => ops::concat_channels(x),
            LayerKind::Add => ops::add(x[0], x[1]),
        }
    }
}

/// Batch norm behaviour when recording on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics for layers whose parameters are trainable; running
    /// estimates are collected for a later update. Frozen layers use running statistics.
    Train,
    /// Running statistics, as at inference.
    Eval,
}

/// Records the graph onto an autodiff tape with weights as leaves.
pub struct TapeBackend<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    weights: &'a WeightStore<T>,
    mode: BnMode,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    params: BTreeMap<String, Var>,
    batch_stats: Vec<(String, Shape, BatchNormTrain<T>)>,
}

impl<'a, T: Element> TapeBackend<'a, T> {
    /// `trainable` decides per slot name whether gradients are required.
    pub fn new(
        tape: &'a mut Tape<T>,
        weights: &'a WeightStore<T>,
        mode: BnMode,
        trainable: impl Fn(&str) -> bool + 'a,
    ) -> Self {
        Self {
            tape,
            weights,
            mode,
            trainable: Box::new(trainable),
            params: BTreeMap::new(),
            batch_stats: Vec::new(),
        }
    }

    fn param(&mut self, layer: &LayerSpec, role: SlotRole) -> Result<Var> {
        let name = slot_name(&layer.name, role);
        if let Some(&v) = self.params.get(&name) {
            return Ok(v);
        }
        let value = self.weights.get(&name)?.clone();
        let v = self.tape.leaf(value, (self.trainable)(&name));
        self.params.insert(name, v);
        Ok(v)
    }

    /// Leaf variables created for weight slots, keyed by slot name.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Ends recording, returning the parameter leaves and pending running-stat updates.
    pub fn finish(self) -> (BTreeMap<String, Var>, RunningStatUpdates<T>) {
        (self.params, RunningStatUpdates(self.batch_stats))
    }
}

/// Batch statistics gathered by a training-mode tape run.
#[derive(Debug, Default)]
pub struct RunningStatUpdates<T>(Vec<(String, Shape, BatchNormTrain<T>)>);

impl<T: Element> RunningStatUpdates<T> {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Blends the batch statistics into `store` with momentum [`BN_MOMENTUM`].
    pub fn apply<U: Element>(&self, store: &mut WeightStore<U>) -> Result<()> {
        for (layer, shape, stats) in &self.0 {
            let mean_name = slot_name(layer, SlotRole::RunningMean);
            let var_name = slot_name(layer, SlotRole::RunningVar);
            let mut mean: Tensor<T> = store.get(&mean_name)?.cast();
            let mut var: Tensor<T> = store.get(&var_name)?.cast();
            ops::update_running_stats(*shape, stats, &mut mean, &mut var, T::of(BN_MOMENTUM));
            *store.get_mut(&mean_name)? = mean.cast();
            *store.get_mut(&var_name)? = var.cast();
        }
        Ok(())
    }
}

impl<T: Element> Backend<T> for TapeBackend<'_, T> {
    type Value = Var;

    fn shape(&self, value: &Var) -> Shape {
        self.tape.value(*value).shape()
    }

    fn apply(&mut self, layer: &LayerSpec, x: &[&Var], target: Option<(usize, usize)>) -> Result<Var> {
        match &layer.kind {
            LayerKind::Input { .. } => unreachable!("inputs are bound by the executor"),
            LayerKind::Conv { params, bias, .. } => {
                let w = self.param(layer, SlotRole::Weight)?;
                let b = if *bias { Some(self.param(layer, SlotRole::Bias)?) } else { None };
                self.tape.conv2d(*x[0], w, b, *params)
            }
            LayerKind::BatchNorm { eps } => {
                let gamma = self.param(layer, SlotRole::Gamma)?;
                let beta = self.param(layer, SlotRole::Beta)?;
                let frozen = !(self.trainable)(&slot_name(&layer.name, SlotRole::Gamma));
                match if frozen { BnMode::Eval } else { self.mode } {
                    BnMode::Train => {
                        let shape = self.tape.value(*x[0]).shape();
                        let (y, mut stats) = self.tape.batch_norm_train(*x[0], gamma, beta, T::of(*eps))?;
                        stats.normalized = Tensor::zeros(Shape::scalar());
                        self.batch_stats.push((layer.name.clone(), shape, stats));
                        Ok(y)
                    }
                    BnMode::Eval => {
                        let mean = self.weights.get(&slot_name(&layer.name, SlotRole::RunningMean))?;
                        let var = self.weights.get(&slot_name(&layer.name, SlotRole::RunningVar))?;
                        self.tape.batch_norm_eval(*x[0], gamma, beta, mean, var, T::of(*eps))
                    }
                }
            }
            LayerKind::Relu6 => Ok(self.tape.relu6(*x[0])),
            LayerKind::Sigmoid => Ok(self.tape.sigmoid(*x[0])),
            LayerKind::SoftmaxSpatial => self.tape.softmax_spatial(*x[0]),
            LayerKind::Resize { .. } => {
                let (h, w) = target.expect("resize target");
                self.tape.bilinear_resize(*x[0], h, w)
            }
            LayerKind::AvgPool2 => self.tape.avg_pool2(*x[0]),
            LayerKind::PixelShuffle { factor } => self.tape.pixel_shuffle(*x[0], *factor),
            LayerKind::Concat => {
                let vars: Vec<Var> = x.iter().map(|v| **v).collect();
                self.tape.concat(&vars)
            }
            LayerKind::Add => self.tape.add(*x[0], *x[1]),
        }
    }
}
