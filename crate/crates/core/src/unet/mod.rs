//! Mask-conditioned noise predictor and the segmenter that shares its
//! backbone.

mod config;
mod embed;
mod net;
mod params;

pub use config::{NetKind, UNetConfig};
pub use embed::{encode_mask, encode_masks, TimeEmbedding};
pub use net::UNet;
pub use params::ParamSet;
