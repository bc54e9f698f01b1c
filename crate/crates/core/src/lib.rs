//! Distilling a tri-plane volumetric generator into a pose-conditioned
//! convolutional renderer.

pub mod alloc;
pub mod bench;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod student;
pub mod teacher;
pub mod trainer;
pub mod triplane;

pub use error::{Error, Result};
