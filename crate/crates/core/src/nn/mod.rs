//! Minimal neural-network building blocks with hand-written backward passes.

mod adam;
mod layers;
mod params;

pub use adam::{clip_global_norm, Adam, AdamSlot, GroupRates, ParamSlice};
pub use layers::{Cache, Conv3d, GroupNorm, Layer, Residual, Volume};
pub use params::{Grads, Param, ParamGroup, ParamId, ParamStore};
