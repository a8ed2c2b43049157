//! Velocity model building with a neural-operator surrogate of time-lag
//! reverse time migration and a diffusion prior.
//!
//! - [`domain`]: grids, fields, normalization, VELB files, profile spectra
//! - [`wave_sim`]: finite-difference modelling and extended imaging
//! - [`velgen`]: synthetic models and training datasets
//! - [`neural_op`]: the FNO/U-Net surrogate and its training loop
//! - [`ddpm`]: the diffusion prior and its refinement step
//! - [`inversion`]: surrogate-based velocity inversion and patching

pub mod ddpm;
pub mod domain;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod neural_op;
pub mod nn;
pub mod velgen;
pub mod wave_sim;

pub use error::{Error, Result};
