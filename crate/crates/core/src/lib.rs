//! Multi-view compressed representations (MVCR) for transformer fine-tuning.
//!
//! Stochastic hierarchical autoencoders are inserted after selected encoder
//! layers during training. Each token representation is, half of the time,
//! replaced by its reconstruction through a randomly chosen autoencoder from
//! a pool of differing compression widths; the autoencoders are trained with
//! a reconstruction loss at a larger learning rate and are removed
//! ("plugged out") for inference, leaving the backbone unchanged in size.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod mvcr;
pub mod nn;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
