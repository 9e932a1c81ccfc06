//! Desk-scale CNN-GRU image captioning with a caption-to-image semantic
//! reconstructor.
//!
//! The crate is organized around a small f64 tensor substrate with
//! reverse-mode autodiff ([`tape`]), on top of which sit the three model
//! networks (a convolutional [`encoder`], a GRU [`decoder`], and a hidden
//! state [`reconstructor`]), the joint training loop ([`trainer`]), beam
//! search inference with reconstruction rescoring ([`beam`]), and the
//! caption evaluation metrics ([`metrics`]). The [`corpus`] module provides
//! the deterministic synthetic scene/caption generator everything is
//! exercised on.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the `std` feature
//! (on by default) only adds wall-clock timing to training logs and native
//! float math. All file formats, IO, and the CLI live in the companion
//! `capforge` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod beam;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod reconstructor;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vocab;

mod fmath;

pub use error::{Error, Result};
pub use tensor::Tensor;
