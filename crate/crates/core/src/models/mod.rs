//! Architectures, parameter sets, and checkpoints.

pub mod checkpoint;
pub mod network;
pub mod params;
pub mod spec;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointMeta};
pub use network::{ForwardCache, Network, ParamEntry, ParamRole};
pub use params::{ParamEma, ParamSet};
pub use spec::{BnMode, FeatureShape, LayerKind, LayerSpec, ModelSpec};
