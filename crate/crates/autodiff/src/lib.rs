//! Reverse-mode automatic differentiation on dense `[B,C,H,W]` tensors.
//!
//! The engine is define-by-run: a [`Tape`] records each op as it executes
//! and [`Tape::backward`] sweeps it once in reverse. It carries exactly the
//! primitives needed by small convolutional / Fourier-layer networks:
//! elementwise math, dense layers, same-padded convolution, spectral
//! channel mixing, pooling/upsampling, instance normalization and the
//! attention helpers, plus an Adam optimizer and a checkpoint container.
//!
//! Everything is generic over [`Real`]; models train in `f32` and tests
//! re-run them in `f64` to compare against finite differences.

pub mod adam;
pub mod channel;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod ops;
pub mod param;
pub mod real;
pub mod resample;
pub mod spectral;
pub mod tape;

pub use adam::{Adam, AdamConfig, StepDecay};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use error::{AdError, Result};
pub use param::{Init, ParamSet, Parameter};
pub use real::Real;
pub use spectral::Modes;
pub use tape::{BackwardCtx, Gradients, Tape, Var};
