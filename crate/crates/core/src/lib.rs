//! Joint satellite-to-street panorama synthesis and cross-view retrieval.
//!
//! A shared encoder feeds a generative decoder and a retrieval branch. The
//! crate covers the full pipeline: polar warping, the three networks, the
//! training objectives and loop, evaluation metrics and a procedural toy
//! corpus for desk-scale experiments.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod polar;
pub mod raster;
pub mod retrieval;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use polar::{polar_source_coords, polar_transform, OutOfBounds, PolarParams};
pub use raster::{RasterImage, ValueRange};
