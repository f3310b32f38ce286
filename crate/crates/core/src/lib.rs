//! Builds spatially aligned canopy-height training samples from classified
//! LiDAR point clouds and multi-temporal orthophotos, and evaluates height
//! predictions with masked regression metrics.

pub mod config;
pub mod elevation;
pub mod error;
pub mod evaluate;
pub mod harmonize;
pub mod ingest;
pub mod metrics;
pub mod mosaic;
pub mod pipeline;
pub mod pointcloud;
pub mod raster;
pub mod sampler;
pub mod synthetic;

pub use error::{Error, Result};
