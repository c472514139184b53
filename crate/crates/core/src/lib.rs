//! Numerical core for panoramic-radiograph-to-volume reconstruction and
//! 2D-3D joint analysis.
//!
//! Everything here is pure computation: a reverse-mode autodiff tape,
//! network layers, procedural phantoms, curved-planar projection geometry,
//! the reconstruction and joint-analysis networks, and evaluation metrics.
//! File formats, rendering and the CLI live in the `pxrecon` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod pgr;
pub mod phantom;
pub mod real;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
