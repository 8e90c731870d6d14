//! Multimodal geometric augmentation.
//!
//! Learns a Gaussian-mixture latent distribution over the initial velocity
//! fields of diffeomorphic deformations, samples new deformations from it,
//! and uses the warped templates to train downstream classifiers and
//! segmenters.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod field;
pub mod geodesic;
pub mod latent;
pub mod nn;
pub mod optim;
pub mod registration;
pub mod tasks;

pub use error::{Error, Result};
