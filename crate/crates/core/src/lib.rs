//! Uncertainty-aware 4D LiDAR generation on range images.
//!
//! The crate is organized bottom-up: file formats and synthetic scenes
//! ([`io`], [`synth`]), range-image geometry ([`geometry`]), entropy-based
//! uncertainty regions ([`uncertainty`]), a small reverse-mode tensor engine
//! ([`autodiff`]), the spatio-temporal denoiser ([`backbone`]), the two-stage
//! diffusion pipeline ([`diffusion`]) and the evaluation suite ([`metrics`]).
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! pin the common choices.

pub mod autodiff;
pub mod backbone;
pub mod cloud;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod rigid;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod uncertainty;

pub use autodiff::{Tape, Tensor};
pub use cloud::{Point, PointCloud};
pub use error::{Result, U4dError};
pub use geometry::{RangeImage, SensorConfig};
pub use rigid::RigidTransform;
pub use scalar::Real;

/// Point cloud as stored on disk.
pub type Cloud = PointCloud<f32>;
pub type Cloud64 = PointCloud<f64>;
pub type RangeImage32 = RangeImage<f32>;
pub type RangeImage64 = RangeImage<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
