//! Open-vocabulary semantic segmentation at desk scale: a hierarchical
//! convolutional encoder, a pixel-text cosine cost map, a gradual fusion
//! decoder and category early rejection, all on a small reverse-mode tensor
//! engine.

pub mod bench;
pub mod cer;
pub mod config;
pub mod cost_map;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gfd;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
