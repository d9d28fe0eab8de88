//! Layer graphs, the FastSal model family and weight handling.

mod exec;
mod fold;
mod graph;
mod model;
mod reference;
mod weights;

pub use exec::{Activations, Backend, BnMode, Inference, RunningStatUpdates, TapeBackend};
pub use fold::fold_batch_norm;
pub use graph::{slot_name, GraphBuilder, LayerKind, LayerSpec, NetworkGraph, NodeId, SlotRole, Variant, WeightSlot};
pub use model::{
    build_backbone, decoder_add, decoder_concat, fastsal, group_feature_blocks, make_divisible,
    modified_inverted_residual, modified_inverted_residual_graph, FeatureBlocks, ModelConfig, ADD_ADAPT_WIDTHS,
    CONCAT_ADAPT_WIDTHS, DECODER_EXPANSION, MOBILENET_V2_SETTINGS, STEM_CHANNELS, TAP_COUNT,
};
pub use reference::vgg16_reference;
pub use weights::{
    init_weights, load_weights, save_weights, weights_from_bytes, weights_to_bytes, WeightStore, WEIGHT_MAGIC,
    WEIGHT_VERSION,
};
