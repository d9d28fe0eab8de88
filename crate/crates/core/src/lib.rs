//! FastSal: a MobileNetV2-based saliency network with concatenation and
//! addition decoders, the distillation losses used to train it, a saliency
//! metric suite, and complexity/latency analysis.

pub mod analyzer;
pub mod autodiff;
pub mod bench;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{FeatureBlocks, ModelConfig, NetworkGraph, Variant, WeightStore};
pub use tensor::{Element, Shape, Tensor};
