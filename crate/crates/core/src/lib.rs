//! EEG-to-mel-spectrogram regression with state-space sequence models.
//!
//! The crate is self-contained: tensors and reverse-mode autodiff live in
//! [`numerics`], the S4 and selective-scan kernels in [`ssm`], attention
//! blocks in [`layers`], the U-Net pre-extractor in [`s4unet`], the macaron
//! backbone in [`backbone`] and the assembled network with its loss in
//! [`model`]. [`data`] and [`train`] cover storage, datasets and optimisation.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod s4unet;
pub mod selftest;
pub mod ssm;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use numerics::{Tape, Tensor, Var};
