//! Declarative layer graphs with named weight slots.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::tensor::Shape;

/// Index of a layer inside a [`NetworkGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// The `index`-th graph input.
    Input { index: usize },
    /// Convolution; depthwise when `groups` equals the input and output channels.
    Conv {
        in_channels: usize,
        kernel: (usize, usize),
        params: ConvParams,
        bias: bool,
    },
    BatchNorm { eps: f64 },
    Relu6,
    Sigmoid,
    SoftmaxSpatial,
    /// Bilinear resize to `factor` times the spatial size of node `like`.
    Resize { like: NodeId, factor: usize },
    AvgPool2,
    PixelShuffle { factor: usize },
    Concat,
    Add,
}

/// Role of a named weight slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl SlotRole {
    /// Running statistics are state, not learned parameters.
    pub fn is_parameter(self) -> bool {
        !matches!(self, SlotRole::RunningMean | SlotRole::RunningVar)
    }

    pub fn suffix(self) -> &'static str {
        match self {
            SlotRole::Weight => "weight",
            SlotRole::Bias => "bias",
            SlotRole::Gamma => "gamma",
            SlotRole::Beta => "beta",
            SlotRole::RunningMean => "running_mean",
            SlotRole::RunningVar => "running_var",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSlot {
    pub name: String,
    pub shape: Shape,
    pub role: SlotRole,
}

pub fn slot_name(layer: &str, role: SlotRole) -> String {
    format!("{layer}.{}", role.suffix())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    /// Output channel count.
    pub channels: usize,
    /// Marks a backbone feature tap.
    pub tap: bool,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { in_channels, params, .. } => {
                if params.groups > 1 && params.groups == *in_channels && params.groups == self.channels {
                    "depthwise-conv"
                } else {
                    "conv"
                }
            }
            LayerKind::BatchNorm { .. } => "bn",
            LayerKind::Relu6 => "relu6",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::SoftmaxSpatial => "softmax-spatial",
            LayerKind::Resize { .. } => "resize",
            LayerKind::AvgPool2 => "avg-pool",
            LayerKind::PixelShuffle { .. } => "pixel-shuffle",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
        }
    }

    /// Weight slots owned by this layer, in serialization order.
    pub fn slots(&self) -> Vec<WeightSlot> {
        let slot = |role, shape| WeightSlot {
            name: slot_name(&self.name, role),
            shape,
            role,
        };
        match &self.kind {
            LayerKind::Conv {
                in_channels,
                kernel,
                params,
                bias,
            } => {
                let mut v = vec![slot(
                    SlotRole::Weight,
                    Shape::new(self.channels, in_channels / params.groups, kernel.0, kernel.1),
                )];
                if *bias {
                    v.push(slot(SlotRole::Bias, Shape::vector(self.channels)));
                }
                v
            }
            LayerKind::BatchNorm { .. } => [SlotRole::Gamma, SlotRole::Beta, SlotRole::RunningMean, SlotRole::RunningVar]
                .into_iter()
                .map(|r| slot(r, Shape::vector(self.channels)))
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Which FastSal decoder a graph carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// FastSal (C): concatenation decoder.
    Concat,
    /// FastSal (A): top-down addition decoder.
    Add,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Concat => "C",
            Variant::Add => "A",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C" | "c" => Ok(Variant::Concat),
            "A" | "a" => Ok(Variant::Add),
            other => Err(Error::config(format!("unknown variant `{other}` (expected C or A)"))),
        }
    }
}

/// Ordered layer list plus the named node sets the rest of the engine reads.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    pub(crate) layers: Vec<LayerSpec>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) outputs: Vec<NodeId>,
    pub(crate) taps: Vec<NodeId>,
    pub(crate) blocks: Vec<NodeId>,
    pub(crate) hints: Vec<NodeId>,
    pub(crate) variant: Option<Variant>,
}

impl NetworkGraph {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: NodeId) -> &LayerSpec {
        &self.layers[id.0]
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    /// Primary output (the saliency logits for full networks).
    pub fn output(&self) -> NodeId {
        self.outputs[0]
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    /// Backbone feature taps ordered by depth.
    pub fn taps(&self) -> &[NodeId] {
        &self.taps
    }

    /// The four grouped feature blocks, finest first (empty for partial graphs).
    pub fn blocks(&self) -> &[NodeId] {
        &self.blocks
    }

    /// Adaptation-layer outputs matched against teacher features by the hint loss.
    pub fn hints(&self) -> &[NodeId] {
        &self.hints
    }

    pub fn variant(&self) -> Option<Variant> {
        self.variant
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.layers.iter().position(|l| l.name == name).map(NodeId)
    }

    pub fn slots(&self) -> Vec<WeightSlot> {
        self.layers.iter().flat_map(LayerSpec::slots).collect()
    }

    /// Ids of the layers that read each node.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            for input in &l.inputs {
                out[input.0].push(NodeId(i));
            }
        }
        out
    }

    /// Checks ordering, naming and channel consistency.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            if !names.insert(l.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name `{}`", l.name)));
            }
            for input in &l.inputs {
                if input.0 >= i {
                    return Err(Error::config(format!("layer `{}` reads a later node", l.name)));
                }
            }
            let in_ch: Vec<usize> = l.inputs.iter().map(|n| self.layers[n.0].channels).collect();
            let expect_inputs = |k: usize| -> Result<()> {
                if l.inputs.len() != k {
                    return Err(Error::config(format!("layer `{}` expects {k} inputs", l.name)));
                }
                Ok(())
            };
            match &l.kind {
                LayerKind::Input { .. } => expect_inputs(0)?,
                LayerKind::Conv { in_channels, params, .. } => {
                    expect_inputs(1)?;
                    if in_ch[0] != *in_channels {
                        return Err(Error::Shape {
                            op: "conv2d",
                            axis: "channels",
                            expected: *in_channels,
                            got: in_ch[0],
                        });
                    }
                    if params.groups == 0 || in_channels % params.groups != 0 || l.channels % params.groups != 0 {
                        return Err(Error::config(format!("layer `{}`: groups do not divide channels", l.name)));
                    }
                }
                LayerKind::Concat => {
                    if l.inputs.is_empty() || in_ch.iter().sum::<usize>() != l.channels {
                        return Err(Error::config(format!("layer `{}`: concat channel mismatch", l.name)));
                    }
                }
                LayerKind::Add => {
                    expect_inputs(2)?;
                    if in_ch[0] != in_ch[1] || in_ch[0] != l.channels {
                        return Err(Error::Shape {
                            op: "add",
                            axis: "channels",
                            expected: in_ch[0],
                            got: in_ch[1],
                        });
                    }
                }
                LayerKind::PixelShuffle { factor } => {
                    expect_inputs(1)?;
                    if *factor == 0 || in_ch[0] != l.channels * factor * factor {
                        return Err(Error::config(format!("layer `{}`: channels not divisible by r²", l.name)));
                    }
                }
                LayerKind::Resize { like, .. } => {
                    expect_inputs(1)?;
                    if like.0 >= i {
                        return Err(Error::config(format!("layer `{}` resizes like a later node", l.name)));
                    }
                }
                _ => {
                    expect_inputs(1)?;
                    if in_ch[0] != l.channels {
                        return Err(Error::config(format!("layer `{}` changes channel count", l.name)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Output shape of every node for the given input shapes.
    pub fn infer_shapes(&self, inputs: &[Shape]) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let s = self.layer_shape(l, inputs, &shapes).map_err(|e| e.in_layer(&l.name))?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    fn layer_shape(&self, l: &LayerSpec, inputs: &[Shape], shapes: &[Shape]) -> Result<Shape> {
        let first = l.inputs.first().map(|i| shapes[i.0]);
        Ok(match &l.kind {
            LayerKind::Input { index } => {
                let s = *inputs
                    .get(*index)
                    .ok_or_else(|| Error::contract(format!("missing graph input {index}")))?;
                if s.c != l.channels {
                    return Err(Error::Shape {
                        op: "input",
                        axis: "channels",
                        expected: l.channels,
                        got: s.c,
                    });
                }
                s
            }
            LayerKind::Conv { kernel, params, .. } => {
                let x = first.expect("validated");
                let (h, w) = params.output_size(x.h, x.w, kernel.0, kernel.1).ok_or(Error::Shape {
                    op: "conv2d",
                    axis: "height",
                    expected: kernel.0,
                    got: x.h + 2 * params.padding.0,
                })?;
                Shape::new(x.n, l.channels, h, w)
            }
            LayerKind::Resize { like, factor } => {
                let t = shapes[like.0];
                first.expect("validated").with_spatial(t.h * factor, t.w * factor)
            }
            LayerKind::AvgPool2 => {
                let x = first.expect("validated");
                if x.h < 2 || x.w < 2 {
                    return Err(Error::Shape {
                        op: "avg_pool2",
                        axis: "height",
                        expected: 2,
                        got: x.h.min(x.w),
                    });
                }
                x.with_spatial(x.h / 2, x.w / 2)
            }
            LayerKind::PixelShuffle { factor } => {
                let x = first.expect("validated");
                Shape::new(x.n, l.channels, x.h * factor, x.w * factor)
            }
            LayerKind::Concat | LayerKind::Add => {
                let x = first.expect("validated");
                for i in &l.inputs[1..] {
                    let s = shapes[i.0];
                    for (axis, a, b) in [("batch", x.n, s.n), ("height", x.h, s.h), ("width", x.w, s.w)] {
                        if a != b {
                            return Err(Error::Shape {
                                op: if matches!(l.kind, LayerKind::Add) { "add" } else { "concat_channels" },
                                axis,
                                expected: a,
                                got: b,
                            });
                        }
                    }
                }
                x.with_channels(l.channels)
            }
            LayerKind::BatchNorm { .. } | LayerKind::Relu6 | LayerKind::Sigmoid | LayerKind::SoftmaxSpatial => {
                first.expect("validated")
            }
        })
    }
}

/// Incremental construction of a [`NetworkGraph`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    inputs: Vec<NodeId>,
    taps: Vec<NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.layers[id.0].channels
    }

    fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind,
            inputs,
            channels,
            tap: false,
        });
        NodeId(self.layers.len() - 1)
    }

    pub fn input(&mut self, name: &str, channels: usize) -> NodeId {
        let index = self.inputs.len();
        let id = self.push(name, LayerKind::Input { index }, vec![], channels);
        self.inputs.push(id);
        id
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> NodeId {
        let kind = LayerKind::Conv {
            in_channels: self.channels(x),
            kernel: (kernel, kernel),
            params: ConvParams::new(stride, (kernel - 1) / 2).with_groups(groups),
            bias,
        };
        self.push(name, kind, vec![x], out)
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(
            name,
            LayerKind::BatchNorm {
                eps: crate::ops::BN_EPS,
            },
            vec![x],
            c,
        )
    }

    pub fn relu6(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(name, LayerKind::Relu6, vec![x], c)
    }

    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(name, LayerKind::Sigmoid, vec![x], c)
    }

    pub fn softmax_spatial(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(name, LayerKind::SoftmaxSpatial, vec![x], c)
    }

    pub fn resize(&mut self, name: &str, x: NodeId, like: NodeId, factor: usize) -> NodeId {
        let c = self.channels(x);
        self.push(name, LayerKind::Resize { like, factor }, vec![x], c)
    }

    pub fn avg_pool2(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(name, LayerKind::AvgPool2, vec![x], c)
    }

    pub fn pixel_shuffle(&mut self, name: &str, x: NodeId, factor: usize) -> NodeId {
        let c = self.channels(x) / (factor * factor);
        self.push(name, LayerKind::PixelShuffle { factor }, vec![x], c)
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        let c = xs.iter().map(|&x| self.channels(x)).sum();
        self.push(name, LayerKind::Concat, xs.to_vec(), c)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        let c = self.channels(a);
        self.push(name, LayerKind::Add, vec![a, b], c)
    }

    pub fn mark_tap(&mut self, id: NodeId) {
        self.layers[id.0].tap = true;
        self.taps.push(id);
    }

    pub fn finish(
        self,
        outputs: Vec<NodeId>,
        blocks: Vec<NodeId>,
        hints: Vec<NodeId>,
        variant: Option<Variant>,
    ) -> Result<NetworkGraph> {
        let graph = NetworkGraph {
            layers: self.layers,
            inputs: self.inputs,
            outputs,
            taps: self.taps,
            blocks,
            hints,
            variant,
        };
        if graph.outputs.is_empty() {
            return Err(Error::config("graph has no outputs"));
        }
        graph.validate()?;
        Ok(graph)
    }
}
