//! Training-free 3D morphing over sparse-voxel structured latents.

pub mod assets;
pub mod attention;
pub mod cli;
pub mod error;
pub mod export;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod orientation;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
