//! Differentiable inverse rendering with learned importance sampling.
//!
//! Surface points are shaded by Monte Carlo integration of a diffuse plus
//! Cook-Torrance GGX reflectance model. Each sampling strategy can be a
//! predefined analytic density or a conditional normalizing flow built from
//! piecewise-quadratic coupling layers and trained jointly with the scene.

pub mod brdf;
pub mod checkpoint;
pub mod color;
pub mod commands;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod geom;
pub mod gradcheck;
pub mod image;
pub mod lighting;
pub mod material;
pub mod nn;
pub mod parallel;
pub mod render;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
