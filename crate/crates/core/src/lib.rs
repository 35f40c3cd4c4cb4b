//! Token-sparse 3D segmentation: a transformer encoder that prunes
//! low-relevance tokens mid-stack, reassembles the full token grid from the
//! survivors, and decodes dense voxel predictions from the completed
//! sequence. Includes the training loop, sliding-window inference,
//! evaluation metrics, and analytic cost accounting used by the CLI.

pub mod assemble;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prune;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
