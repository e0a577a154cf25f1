//! LiDAR odometry and mapping with 2D Gaussian splats rendered through a
//! differentiable spherical tile rasterizer.

pub mod config;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod mapping;
pub mod pipeline;
pub mod rasterizer;
pub mod registration;
pub mod splats;
pub mod synth;
