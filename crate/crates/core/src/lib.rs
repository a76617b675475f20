//! Ray-conditioned sampling and keyframe-factorized volumes for 6-DoF video.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod raster;
pub mod render;
pub mod sh;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use nalgebra;
