//! Cascaded tumour segmentation for tiled gigapixel slides.
//!
//! Stage one classifies non-overlapping high-resolution patches and stitches
//! their tumour probabilities into a heatmap. Stage two fuses that heatmap
//! with a low-resolution view of the slide and refines it into a mask.

pub mod cluster;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod learn;
pub mod pipeline;
pub mod pyramid;
pub mod sampler;
pub mod tissue;

pub use error::{Error, Result};
