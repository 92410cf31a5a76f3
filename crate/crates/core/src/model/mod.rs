//! Layer graphs, architecture builders and the packed inference network.

mod arch;
mod graph;
mod infer;

pub use arch::{Arch, BN_EPS};
pub use graph::{
    BatchNormLayer, FrozenThresholds, Layer, ModelGraph, Policy, PolicyTag, QuantViews,
    ResidualBlock, Shortcut, WeightLayer,
};
pub use infer::{InferLayer, InferShortcut, InferenceNet};
