//! Multi-scale group attention and group graph correlation for
//! multi-attribute recognition, on a small define-by-run tensor engine.
//!
//! The crate is `no_std` (with `alloc`); file formats, training loop and the
//! command-line tool live in the companion `mgg` crate.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`params`]: dense `f64` tensors, reverse-mode
//!   differentiation, parameter storage and SGD.
//! - [`groups`]: attribute catalog and part-based groups.
//! - [`backbone`], [`gal`], [`gcl`], [`heads`], [`model`]: the network.
//! - [`metrics`]: mean prediction and balanced accuracy.
//! - [`synth`], [`data`]: synthetic benchmark and dataset handling.
//! - [`gradcheck`]: finite-difference verification of the whole model.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod data;
mod error;
pub mod gal;
pub mod gcl;
pub mod gradcheck;
pub mod groups;
pub mod heads;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{MggModel, ModelConfig, Variant};
pub use params::{ParamStore, Sgd};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
