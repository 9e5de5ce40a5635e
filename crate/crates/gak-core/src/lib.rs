//! Core library: mesh-anchored Gaussian splatting, a DDIM-style schedule, and
//! the hybrid 2D/3D sampling loop that ties them together.

pub mod camera;
pub mod diffusion;
pub mod error;
pub mod feature;
pub mod fixtures;
pub mod imgbuf;
pub mod mesh;
pub mod raster;
pub mod rectify;
pub mod rng;
pub mod sampler;
pub mod splat;

pub use error::{Error, Result};
