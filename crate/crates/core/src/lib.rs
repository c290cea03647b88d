//! Training-free 6D object pose estimation from rendered templates.
//!
//! Onboarding renders a mesh from Fibonacci viewpoints and stores compressed
//! patch descriptors with their 3D centres. Inference ranks templates by
//! mutual nearest-neighbour matches, fits poses with RANSAC over 3D–3D
//! correspondences and keeps the one with the lowest alignment error.

pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod matching;
pub mod onboard;
pub mod pose;
pub mod raster;
pub mod render;
pub mod spatial;

pub use error::{Error, Result};
