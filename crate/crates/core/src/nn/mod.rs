//! Minimal layer toolkit on top of `candle-core` autodiff.

pub mod adam;
pub mod im2col;
pub mod layers;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{Conv2d, ConvConfig, InstanceNorm, Linear, Mode, NonLocal, Padding, SpectralNorm};
pub use params::{ParamBuilder, ParamStore};
