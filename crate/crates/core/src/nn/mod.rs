//! Network building blocks.

pub mod layers;
pub mod params;
pub mod rfr;

pub use layers::{BatchNorm, Conv1x1, Dense, Forward, Lstm, Mode, NormUpdate};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
pub use rfr::{BlockOutput, BlockSpec, Inference, NetOutput, Network, NetworkConfig, RfrBlock};
