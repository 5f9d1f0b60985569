//! Perceptual GAN for small-object detection, at desk scale.
//!
//! A generator learns a residual that lifts the pooled features of small
//! objects toward those of large ones. A two-branch discriminator judges the
//! result: an adversarial branch separates real large-object features from
//! super-resolved ones, and a perception branch (the detection head) checks
//! that the super-resolved features stay useful for detection.

pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod generator;
pub mod io;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
