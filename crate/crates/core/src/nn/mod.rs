//! Minimal neural-network building blocks on top of `candle-core`.

pub mod conv;
pub mod layers;
pub mod ops;
pub mod params;

pub use conv::conv2d;
pub use ops::{add_channel_bias, group_norm, silu};
pub use layers::{upsample_nearest, Conv2d, GroupNorm, Linear};
pub use params::ParamStore;
