//! Sparse mixture-of-experts point cloud segmentation trained jointly on
//! heterogeneous synthetic domains, with routing analytics.

pub mod analytics;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod langhead;
pub mod moe;
pub mod nn;
pub mod sampler;
pub mod selfcheck;
pub mod serialization;
pub mod syndata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
