//! Source separation by gradient ascent through frozen models.
//!
//! Given an audio mixture, a latent code of a frozen autoencoder is optimized
//! so that the decoded audio, used as a spectral mask on the mixture, drives a
//! frozen multi-label tagger toward a target tag set; the residual is the
//! separated source. All models are small stand-ins trained by this toolkit
//! itself on synthetic data, so the whole pipeline is verifiable at desk scale.
//!
//! Start with the runnable examples (`cargo run --release --example ...`) or
//! the `tagsep` binary, which exposes the pipeline as subcommands.

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod eval;
pub mod error;
pub mod models;
pub mod separation;

pub use error::{Error, Result};
