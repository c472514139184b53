//! Network layers built on the autodiff tape.

mod blocks;
mod layers;
mod store;

pub use blocks::{ChannelAttention, GatedMlp, HbBlock, HbConfig, DEFAULT_BLOCK_SIZE, DEFAULT_REDUCTION};
pub use layers::{BatchNorm, Conv, ConvBlock, Dims, Linear, BN_EPS, BN_MOMENTUM};
pub use store::{param_grads, Ctx, Entry, Init, Kind, Mode, ParamId, Store};
