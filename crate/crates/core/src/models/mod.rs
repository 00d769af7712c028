//! The segmentation and grading networks and the handoff between them.
//!
//! The segmenter is an encoder-decoder with skip connections gated by soft
//! additive attention. The grader runs a densely connected branch and a
//! plain convolutional branch side by side on the masked input, fuses them,
//! refines the fused map with spatial/channel attention and token
//! self-attention, and classifies the pooled features.

mod checkpoint;
mod handoff;
mod hybrid;
mod infer;
mod unet;

pub use checkpoint::{hybrid_checkpoint, nest, unet_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use handoff::{mask_and_feed, Handoff, HandoffMode, DEFAULT_THRESHOLD};
pub use hybrid::{
    transition_channels, DenseBlock, DenseBlockConfig, DenseBranch, DenseBranchConfig, FeatureShape, Hybrid,
    HybridConfig, HybridOutput, Transition, VggBranch, VggBranchConfig,
};
pub use infer::{argmax, classify, segment, stack, unstack, Segmenter};
pub use unet::{UNet, UNetConfig, UNetOutput};

/// Class index of high-grade cases in classifier outputs.
pub const HGG: usize = 0;
/// Class index of low-grade cases in classifier outputs.
pub const LGG: usize = 1;

#[cfg(test)]
mod tests;
