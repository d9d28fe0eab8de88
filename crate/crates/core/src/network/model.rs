//! MobileNetV2 backbone, feature grouping and the two FastSal decoders.

use super::graph::{GraphBuilder, NetworkGraph, NodeId, Variant};
use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// MobileNetV2 inverted residual settings: expansion t, channels c, repeats n, stride s.
pub const MOBILENET_V2_SETTINGS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

pub const STEM_CHANNELS: usize = 32;
pub const TAP_COUNT: usize = 18;
pub const CONCAT_ADAPT_WIDTHS: [usize; 4] = [128, 256, 512, 512];
pub const ADD_ADAPT_WIDTHS: [usize; 4] = [64, 128, 256, 512];
/// Expansion ratio inside the decoder's modified inverted residual blocks.
pub const DECODER_EXPANSION: usize = 2;

/// Rounds `v` to the nearest multiple of `divisor`, never dropping below 90% of `v`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = ((v + d / 2.0) / d).floor() * d;
    out = out.max(d);
    if out < 0.9 * v {
        out += d;
    }
    out as usize
}

/// Network family parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Channel multiplier applied to backbone and decoder widths.
    pub width: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self { variant, width: 1.0 }
    }

    pub fn with_width(self, width: f64) -> Self {
        Self { width, ..self }
    }

    pub fn scale(&self, channels: usize) -> usize {
        if self.width == 1.0 {
            channels
        } else {
            make_divisible(channels as f64 * self.width, 8)
        }
    }

    pub fn adapt_widths(&self) -> [usize; 4] {
        let base = match self.variant {
            Variant::Concat => CONCAT_ADAPT_WIDTHS,
            Variant::Add => ADD_ADAPT_WIDTHS,
        };
        base.map(|c| self.scale(c))
    }

    /// Builds the graph for inputs of the given shape (H and W divisible by 32).
    pub fn build(&self, input: Shape) -> Result<NetworkGraph> {
        check_input(input)?;
        self.graph()
    }

    /// Builds the graph without validating an input size; any size whose
    /// stride-32 feature map is non-empty executes.
    pub fn graph(&self) -> Result<NetworkGraph> {
        let mut b = GraphBuilder::new();
        let x = b.input("image", 3);
        let taps = backbone(&mut b, x, self);
        let blocks = group_blocks(&mut b, &taps);
        let widths = self.adapt_widths();
        let (out, hints) = match self.variant {
            Variant::Concat => concat_decoder(&mut b, blocks, widths),
            Variant::Add => add_decoder(&mut b, blocks, widths),
        };
        b.finish(vec![out], blocks.to_vec(), hints, Some(self.variant))
    }
}

fn check_input(input: Shape) -> Result<()> {
    if input.c != 3 {
        return Err(Error::Shape {
            op: "fastsal",
            axis: "channels",
            expected: 3,
            got: input.c,
        });
    }
    if input.h == 0 || input.w == 0 || !input.h.is_multiple_of(32) || !input.w.is_multiple_of(32) {
        return Err(Error::config(format!(
            "input size {}x{} must be a positive multiple of 32",
            input.h, input.w
        )));
    }
    Ok(())
}

/// Backbone taps together with their cumulative stride.
pub(crate) struct Taps {
    nodes: Vec<NodeId>,
    strides: Vec<usize>,
}

pub(crate) fn backbone(b: &mut GraphBuilder, x: NodeId, cfg: &ModelConfig) -> Taps {
    let mut taps = Taps {
        nodes: Vec::new(),
        strides: Vec::new(),
    };
    let stem = cfg.scale(STEM_CHANNELS);
    let y = b.conv("backbone.stem.conv", x, stem, 3, 2, 1, false);
    let y = b.batch_norm("backbone.stem.bn", y);
    let mut y = b.relu6("backbone.stem.act", y);
    b.mark_tap(y);
    let mut stride = 2;
    taps.nodes.push(y);
    taps.strides.push(stride);
    let mut cin = stem;
    let mut index = 1;
    for &(t, c, n, s) in &MOBILENET_V2_SETTINGS {
        let cout = cfg.scale(c);
        for i in 0..n {
            let st = if i == 0 { s } else { 1 };
            let p = format!("backbone.block{index}");
            let hidden = cin * t;
            let mut h = y;
            if t != 1 {
                h = b.conv(&format!("{p}.expand.conv"), h, hidden, 1, 1, 1, false);
                h = b.batch_norm(&format!("{p}.expand.bn"), h);
                h = b.relu6(&format!("{p}.expand.act"), h);
            }
            h = b.conv(&format!("{p}.dw.conv"), h, hidden, 3, st, hidden, false);
            h = b.batch_norm(&format!("{p}.dw.bn"), h);
            h = b.relu6(&format!("{p}.dw.act"), h);
            h = b.conv(&format!("{p}.project.conv"), h, cout, 1, 1, 1, false);
            h = b.batch_norm(&format!("{p}.project.bn"), h);
            if st == 1 && cin == cout {
                h = b.add(&format!("{p}.residual"), h, y);
            }
            y = h;
            stride *= st;
            b.mark_tap(y);
            taps.nodes.push(y);
            taps.strides.push(stride);
            cin = cout;
            index += 1;
        }
    }
    taps
}

/// Groups taps by stride into B1..B4 (strides 4, 8, 16, 32); stride-2 taps are pooled into B1.
pub(crate) fn group_blocks(b: &mut GraphBuilder, taps: &Taps) -> [NodeId; 4] {
    let mut groups: [Vec<NodeId>; 4] = Default::default();
    let mut pooled = 0;
    for (&node, &stride) in taps.nodes.iter().zip(&taps.strides) {
        let node = if stride == 2 {
            pooled += 1;
            b.avg_pool2(&format!("features.pool{pooled}"), node)
        } else {
            node
        };
        let level = (stride.max(4).trailing_zeros() - 2) as usize;
        groups[level.min(3)].push(node);
    }
    let mut out = [NodeId(0); 4];
    for (i, g) in groups.iter().enumerate() {
        out[i] = b.concat(&format!("features.b{}", i + 1), g);
    }
    out
}

/// Returns (logits, adapted hint nodes).
pub(crate) fn concat_decoder(b: &mut GraphBuilder, blocks: [NodeId; 4], widths: [usize; 4]) -> (NodeId, Vec<NodeId>) {
    let mut adapted = Vec::new();
    let mut ups = Vec::new();
    for (i, (&blk, &w)) in blocks.iter().zip(&widths).enumerate() {
        let a = b.conv(&format!("decoder.adapt{}", i + 1), blk, w, 1, 1, 1, true);
        adapted.push(a);
        ups.push(b.resize(&format!("decoder.up{}", i + 1), a, blocks[0], 2));
    }
    let cat = b.concat("decoder.concat", &ups);
    let sh = b.pixel_shuffle("decoder.shuffle", cat, 2);
    let out = b.conv("decoder.head", sh, 1, 3, 1, 1, true);
    (out, adapted)
}

/// Fig. 3 block: optional additive merge, then an expansion-2 inverted residual.
pub(crate) fn modified_ir(b: &mut GraphBuilder, prefix: &str, x: NodeId, prev: Option<NodeId>, d_out: usize) -> NodeId {
    let s = match prev {
        Some(p) => b.add(&format!("{prefix}.merge"), x, p),
        None => x,
    };
    let d_in = b.channels(s);
    let e = DECODER_EXPANSION * d_in;
    let h = b.conv(&format!("{prefix}.expand.conv"), s, e, 1, 1, 1, true);
    let h = b.batch_norm(&format!("{prefix}.expand.bn"), h);
    let h = b.relu6(&format!("{prefix}.expand.act"), h);
    let h = b.conv(&format!("{prefix}.dw.conv"), h, e, 3, 1, e, true);
    let h = b.batch_norm(&format!("{prefix}.dw.bn"), h);
    let h = b.relu6(&format!("{prefix}.dw.act"), h);
    let h = b.conv(&format!("{prefix}.project.conv"), h, d_out, 1, 1, 1, true);
    let h = b.batch_norm(&format!("{prefix}.project.bn"), h);
    if d_in == d_out {
        b.add(&format!("{prefix}.residual"), h, s)
    } else {
        h
    }
}

pub(crate) fn add_decoder(b: &mut GraphBuilder, blocks: [NodeId; 4], widths: [usize; 4]) -> (NodeId, Vec<NodeId>) {
    let adapted: Vec<NodeId> = blocks
        .iter()
        .zip(&widths)
        .enumerate()
        .map(|(i, (&blk, &w))| b.conv(&format!("decoder.adapt{}", i + 1), blk, w, 1, 1, 1, true))
        .collect();
    let mut prev: Option<NodeId> = None;
    for level in (0..4usize).rev() {
        let d_out = widths[level.saturating_sub(1)];
        let merged = prev.map(|p| b.resize(&format!("decoder.level{}.up", level + 1), p, adapted[level], 1));
        prev = Some(modified_ir(b, &format!("decoder.level{}", level + 1), adapted[level], merged, d_out));
    }
    let y = prev.expect("four levels");
    let y = b.pixel_shuffle("decoder.shuffle1", y, 2);
    let mid = b.channels(y).div_ceil(4) * 4;
    let y = b.conv("decoder.bridge", y, mid, 1, 1, 1, true);
    let y = b.pixel_shuffle("decoder.shuffle2", y, 2);
    let out = b.conv("decoder.head", y, 1, 3, 1, 1, true);
    (out, adapted)
}

/// Full FastSal network of the given variant at width 1.0.
pub fn fastsal(variant: Variant, input: Shape) -> Result<NetworkGraph> {
    ModelConfig::new(variant).build(input)
}

/// MobileNetV2 feature extractor whose outputs are the 18 taps.
pub fn build_backbone(input: Shape) -> Result<NetworkGraph> {
    check_input(input)?;
    let cfg = ModelConfig::new(Variant::Concat);
    let mut b = GraphBuilder::new();
    let x = b.input("image", 3);
    let taps = backbone(&mut b, x, &cfg);
    b.finish(taps.nodes, Vec::new(), Vec::new(), None)
}

/// The four grouped feature blocks, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlocks<T = f32> {
    pub blocks: [Tensor<T>; 4],
}

impl<T: Element> FeatureBlocks<T> {
    pub fn channels(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.blocks[i].shape().c)
    }
}

/// Groups 18 depth-ordered taps into four blocks by spatial size.
///
/// Taps at the finest scale are average-pooled and merged into B1.
pub fn group_feature_blocks<T: Element>(taps: &[Tensor<T>]) -> Result<FeatureBlocks<T>> {
    if taps.len() != TAP_COUNT {
        return Err(Error::contract(format!("expected {TAP_COUNT} taps, got {}", taps.len())));
    }
    let finest = taps[0].shape();
    let mut groups: Vec<(usize, Vec<Tensor<T>>)> = Vec::new();
    for t in taps {
        let s = t.shape();
        let t = if s.h == finest.h && s.w == finest.w {
            crate::ops::avg_pool2(t)?
        } else {
            t.clone()
        };
        let key = t.shape().h * 100_000 + t.shape().w;
        match groups.last_mut() {
            Some((k, g)) if *k == key => g.push(t),
            _ => groups.push((key, vec![t])),
        }
    }
    if groups.len() != 4 {
        return Err(Error::contract(format!(
            "taps form {} spatial scales after pooling, expected 4",
            groups.len()
        )));
    }
    let mut it = groups.into_iter().map(|(_, g)| {
        let refs: Vec<&Tensor<T>> = g.iter().collect();
        crate::ops::concat_channels(&refs)
    });
    Ok(FeatureBlocks {
        blocks: [
            it.next().expect("4")?,
            it.next().expect("4")?,
            it.next().expect("4")?,
            it.next().expect("4")?,
        ],
    })
}

fn decoder_graph(cfg: &ModelConfig, channels: [usize; 4]) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new();
    let blocks = [0, 1, 2, 3].map(|i| b.input(&format!("features.b{}", i + 1), channels[i]));
    let widths = cfg.adapt_widths();
    let (out, hints) = match cfg.variant {
        Variant::Concat => concat_decoder(&mut b, blocks, widths),
        Variant::Add => add_decoder(&mut b, blocks, widths),
    };
    b.finish(vec![out], blocks.to_vec(), hints, Some(cfg.variant))
}

fn run_decoder<T: Element>(cfg: &ModelConfig, blocks: &FeatureBlocks<T>, weights: &WeightStore<T>) -> Result<Tensor<T>> {
    let g = decoder_graph(cfg, blocks.channels())?;
    let refs: Vec<&Tensor<T>> = blocks.blocks.iter().collect();
    g.forward(weights, &refs)
}

/// Concatenation decoder on grouped features; slot names match the full network.
pub fn decoder_concat<T: Element>(blocks: &FeatureBlocks<T>, weights: &WeightStore<T>) -> Result<Tensor<T>> {
    run_decoder(&ModelConfig::new(Variant::Concat), blocks, weights)
}

/// Top-down addition decoder on grouped features; slot names match the full network.
pub fn decoder_add<T: Element>(blocks: &FeatureBlocks<T>, weights: &WeightStore<T>) -> Result<Tensor<T>> {
    run_decoder(&ModelConfig::new(Variant::Add), blocks, weights)
}

/// Graph of one modified inverted residual block named `prefix`, inputs `x` and `prev`.
pub fn modified_inverted_residual_graph(prefix: &str, d_in: usize, d_out: usize, with_prev: bool) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new();
    let x = b.input("x", d_in);
    let prev = with_prev.then(|| b.input("prev", d_in));
    let out = modified_ir(&mut b, prefix, x, prev, d_out);
    b.finish(vec![out], Vec::new(), Vec::new(), None)
}

/// Evaluates one modified inverted residual block; `weights` hold slots under `prefix`.
pub fn modified_inverted_residual<T: Element>(
    x: &Tensor<T>,
    prev_resized: &Tensor<T>,
    weights: &WeightStore<T>,
    prefix: &str,
    d_out: usize,
) -> Result<Tensor<T>> {
    let (a, b) = (x.shape(), prev_resized.shape());
    for (axis, e, g) in [("batch", a.n, b.n), ("channels", a.c, b.c), ("height", a.h, b.h), ("width", a.w, b.w)] {
        if e != g {
            return Err(Error::Shape {
                op: "modified_inverted_residual",
                axis,
                expected: e,
                got: g,
            });
        }
    }
    let g = modified_inverted_residual_graph(prefix, x.shape().c, d_out, true)?;
    g.forward(weights, &[x, prev_resized])
}
