//! Deployment path: packed 2-bit weights and add/sub-only kernels.

pub mod fold;
pub mod kernels;
pub mod packed;

pub use fold::{fold_alpha_into_bn, BnParams};
pub use kernels::{counters, reset_counters, ternary_conv2d, ternary_dense, AlphaMode, OpCounts};
pub use packed::{pack, pack_codes, unpack, unpack_codes, PackedTernary, CODES_PER_WORD};
