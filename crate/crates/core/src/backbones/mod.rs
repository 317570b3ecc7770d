//! Backbone descriptions, network construction and checkpoints.

pub mod checkpoint;
mod network;
pub mod presets;

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, LoadReport};
pub use network::{
    BuildVariant, ConvPlan, ForwardOutput, GatedConv, Layer, LayerSpec, Network, NetworkConfig, ResBlock,
};
