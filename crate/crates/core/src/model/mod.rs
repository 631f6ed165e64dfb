//! The DeepFusionNet graph, its presets, and checkpoint serialization.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_into, save_checkpoint, Checkpoint, ManifestEntry, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, Variant};
pub use network::{DfnModel, ParamRow, ParameterReport, DOWNSAMPLE_FACTOR};
