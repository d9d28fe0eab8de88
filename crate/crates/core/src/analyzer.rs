//! Parameter and FLOP accounting over a [`NetworkGraph`].

use std::fmt;

use crate::error::Result;
use crate::network::{LayerKind, NetworkGraph};
use crate::tensor::Shape;

/// The counting rules every report is tagged with.
pub const CONVENTION: &str = "mac2: conv flops = 2*C_out*(C_in/groups)*K_h*K_w*H_out*W_out; \
bn/relu6/sigmoid/softmax/resize/avg-pool = 2 per output element; add = 1 per output element; \
concat/pixel-shuffle = 0; params: conv weight + bias, bn gamma + beta (running stats excluded)";

pub const CONVENTION_TAG: &str = "mac2";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: usize,
    pub flops: u64,
    pub out_shape: Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub input: Shape,
    pub rows: Vec<LayerCost>,
    pub convention: &'static str,
}

/// Learned scalars of one layer under the report convention.
pub fn layer_params(kind: &LayerKind, channels: usize) -> usize {
    match kind {
        LayerKind::Conv {
            in_channels,
            kernel,
            params,
            bias,
        } => channels * (in_channels / params.groups) * kernel.0 * kernel.1 + if *bias { channels } else { 0 },
        LayerKind::BatchNorm { .. } => 2 * channels,
        _ => 0,
    }
}

fn layer_flops(kind: &LayerKind, out: Shape) -> u64 {
    let elems = out.numel() as u64;
    match kind {
        LayerKind::Conv {
            in_channels,
            kernel,
            params,
            ..
        } => 2 * elems * ((in_channels / params.groups) * kernel.0 * kernel.1) as u64,
        LayerKind::BatchNorm { .. }
        | LayerKind::Relu6
        | LayerKind::Sigmoid
        | LayerKind::SoftmaxSpatial
        | LayerKind::Resize { .. }
        | LayerKind::AvgPool2 => 2 * elems,
        LayerKind::Add => elems,
        LayerKind::Input { .. } | LayerKind::Concat | LayerKind::PixelShuffle { .. } => 0,
    }
}

/// Per-layer costs in execution order for a single graph input of shape `input`.
pub fn analyze(graph: &NetworkGraph, input: Shape) -> Result<ComplexityReport> {
    let shapes = graph.infer_shapes(&[input])?;
    let rows = graph
        .layers()
        .iter()
        .zip(shapes)
        .map(|(l, s)| LayerCost {
            name: l.name.clone(),
            kind: l.kind_name(),
            params: layer_params(&l.kind, l.channels),
            flops: layer_flops(&l.kind, s),
            out_shape: s,
        })
        .collect();
    Ok(ComplexityReport {
        input,
        rows,
        convention: CONVENTION,
    })
}

/// Parameter count of a graph; independent of input size.
pub fn count_params(graph: &NetworkGraph) -> usize {
    graph.layers().iter().map(|l| layer_params(&l.kind, l.channels)).sum()
}

impl ComplexityReport {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params() as f64 / 1e6
    }

    /// A `# convention:` comment, then `name,params,flops,out_shape` rows and a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# convention: {CONVENTION_TAG}\nname,params,flops,out_shape\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.name, r.params, r.flops, r.out_shape));
        }
        s.push_str(&format!(
            "total,{},{},{}\n",
            self.total_params(),
            self.total_flops(),
            self.rows.last().map(|r| r.out_shape.to_string()).unwrap_or_default()
        ));
        s
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        writeln!(f, "{:<width$}  {:<15}  {:>10}  {:>14}  shape", "layer", "kind", "params", "flops")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:<15}  {:>10}  {:>14}  {}",
                r.name, r.kind, r.params, r.flops, r.out_shape
            )?;
        }
        writeln!(
            f,
            "total: {} params ({:.3} M), {} flops ({:.3} GFLOPs) at input {}",
            self.total_params(),
            self.mparams(),
            self.total_flops(),
            self.gflops(),
            self.input
        )?;
        write!(f, "convention: {}", CONVENTION_TAG)
    }
}
