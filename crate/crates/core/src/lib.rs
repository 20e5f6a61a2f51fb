//! Electrode-layout optimization for 2D electrical impedance tomography.

pub mod error;
pub mod dataset;
pub mod forward;
pub mod geometry;
pub mod linalg;
pub mod mesh;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod reconstruct;
pub mod sampler;
pub mod seeds;
pub mod svg;

pub use error::{Error, Result};
