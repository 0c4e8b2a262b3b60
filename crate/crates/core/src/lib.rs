//! Prototype-aligned test-time adaptation.
//!
//! A model is trained jointly on a supervised cross-entropy objective and a
//! swapped-prediction clustering objective over a bank of unit-norm
//! prototypes, optionally with an entropy regulariser that ties prototypes to
//! classes. At test time every sample is adapted on its own: copies of it are
//! augmented, codes are assigned with a closed-form softmax over prototypes,
//! and a few gradient steps on the backbone align its projection with the
//! prototypes before predicting. Weights are reset after every sample.

pub mod adapt;
pub mod augment;
mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod ot_codes;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
