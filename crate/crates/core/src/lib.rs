//! Multimodal deformable registration with deep neighbourhood
//! self-similarity representations.
//!
//! The crate is `no_std` with `alloc`. Enable the `std` feature for wall-clock
//! timing of registrations and `std::error::Error` integration.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augmentation;
pub mod autodiff;
pub mod baseline;
pub mod contrastive;
pub mod error;
#[cfg(test)]
mod fieldcheck;
pub mod masrnet;
mod math;
pub mod metrics;
pub mod phantom;
pub mod registration;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask, Dims, DisplacementField, FeatureField, Volume};
