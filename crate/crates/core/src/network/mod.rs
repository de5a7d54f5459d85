//! Network description, construction, forward pass and checkpoints.

mod blocks;
mod checkpoint;
mod model;
mod spec;

pub use blocks::{
    downsample_block, downsample_features, fcb_block, fcb_forward, ConvVars, FcbParams, FcbVars, NormVars,
};
pub use checkpoint::{network_tensors, Checkpoint, Manifest, NamedTensor, TensorEntry};
pub(crate) use model::round_f32;
pub use model::{build_lrnnet, network_forward, ForwardPass, LayerPlan, Network, Param, PlanOp, RunningStats};
pub use spec::{ModelVariant, NetworkSpec, DEFAULT_DILATIONS};
