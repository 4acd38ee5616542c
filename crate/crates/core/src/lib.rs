//! Atlas-guided spatiotemporal masking for 4D fMRI volumes, the
//! preprocessing that feeds it, and a small masked-autoencoder + linear-probe
//! harness for comparing masking strategies.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the storage type used by the CLI and the experiment harness.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atlas;
pub mod error;
pub mod harness;
pub mod io;
pub mod mae;
pub mod masking;
pub mod preprocess;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use volume::{GridDims, LabelVolume, Mask3D, Mask4D, Volume4D};

/// Volumes as stored on disk and processed by default.
pub type Volume = Volume4D<f32>;
pub type Volume64 = Volume4D<f64>;

pub type Model = mae::MaeModel<f32>;
pub type Model64 = mae::MaeModel<f64>;
