//! Template-guided implicit reconstruction of labeled pulmonary-segment volumes.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: voxel grids, coordinate conventions, interpolation, connectivity
//!   and the SVOL file format.
//! - [`phantom`]: procedural lung-like subjects, subject bundles and dataset splits.
//! - [`nn`]: a small reverse-mode autodiff library with the layers, losses and
//!   optimizer the model needs, plus a finite-difference checker.
//! - [`model`]: encoder feature pyramid, template generator, deformation and
//!   correction heads, and the composed occupancy pipeline.
//! - [`train`]: template pretraining, end-to-end training and dense inference.
//! - [`metrics`]: Dice, surface Dice and the intrusion metrics, with brute-force
//!   reference implementations.

pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
