//! Core of an interactive machine-teaching toolkit.

pub mod classifier;
pub mod dataset;
pub mod diversity;
pub mod error;
pub mod live;
pub mod nn;
pub mod raster;
pub mod saliency;
pub mod segmenter;
pub mod session;
pub mod weights;

pub use error::{Error, Result};
pub use raster::{Frame, Mask};
