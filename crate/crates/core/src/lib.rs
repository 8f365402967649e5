//! Portable launch-script generation for HPC clusters.

pub mod bridge;
pub mod debug;
pub mod intent;
pub mod kinds;
pub mod lint;
pub mod pipeline;
pub mod registry;
pub mod retrieval;
pub mod sim;
pub mod synthesis;
pub mod templates;
