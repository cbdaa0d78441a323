//! Numerical laboratory for the time-domain enclosure method in a two-layer
//! medium with a slow lower layer.
//!
//! An inclusion `D` sits below the interface x3 = 0, a source ball `B`
//! above it. The crate provides
//!
//! - [`geometry`]: refraction points, optical distances and the region estimate,
//! - [`green`]: the two-layer kernel Φ_τ(x, y) for x below the interface and
//!   its leading asymptotics,
//! - [`wave`]: finite-difference synthesis of the measured wave data,
//! - [`indicator`]: the indicator function and the energy functionals,
//! - [`reconstruction`]: decay-rate fitting, contrast classification and
//!   region output,
//! - [`experiment`]: config files and the end-to-end pipeline.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod green;
pub mod indicator;
pub mod quadrature;
pub mod reconstruction;
pub mod shapes;
pub mod wave;

pub use error::{Error, Result};

/// Points of ℝ³; x3 is the vertical coordinate, the interface is x3 = 0.
pub type Point3 = nalgebra::Vector3<f64>;
