//! Sparse-annotation segmentation of the left ventricle in echocardiogram
//! videos: data ingest, clip sampling, temporal masking, volumetric and
//! super-image networks, training, evaluation and temporal analysis.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod ingest;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod phantom;
pub mod sampler;
pub mod super_image;
pub mod train;
pub mod types;

pub use error::{Error, Result};
