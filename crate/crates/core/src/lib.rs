//! Multi-view depth estimation with overlap masks and rotation-aware
//! volumetric fusion into a truncated signed distance field.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod mvs;
pub mod pipeline;
pub mod posedconv;
pub mod raster;
pub mod synthetic;
pub mod tsdf;
pub mod volume;

pub use error::{Error, Result};
