//! Feature-generating VAE-GAN with latent embedding feedback and
//! discriminative feature transformation for (generalized) zero-shot
//! classification.
//!
//! The pipeline: train a conditional VAE-GAN feature generator with a
//! semantic embedding decoder and feedback module on seen-class
//! features, synthesize unseen-class features from class embeddings,
//! transform features with the decoder's latent embedding, and train
//! and evaluate the final ZSL/GZSL softmax classifiers.

pub mod autodiff;
pub mod bundle;
pub mod checkpoint;
pub mod classify;
pub mod data;
pub mod error;
pub mod losses;
pub mod synthesis;
pub mod training;
pub mod networks;
pub mod pipeline;

pub mod cli;

pub use error::{Error, Result};
