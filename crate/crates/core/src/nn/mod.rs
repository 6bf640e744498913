//! Minimal differentiable layers on top of `candle-core`.

mod layers;
pub mod resample;
mod store;

pub use layers::{
    max_pool_3x3_s2_nonneg, reflect_pad1, sigmoid, softmax_last_dim, softplus, to_f64_vec,
    BatchNorm2d, Conv2d, ConvTranspose2d, DepthwiseConv3x3, LayerNorm, Linear,
};
pub use store::{Init, ParamPath, ParamStore};
