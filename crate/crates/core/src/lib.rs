//! Multiple random masking autoencoder ensembles.
//!
//! A masked autoencoder is trained to reconstruct every feature of an
//! observation from a randomly masked copy of it (masked entries are replaced
//! by their training-split means). The same model then doubles as an implicit
//! ensemble at inference time, a feature-importance estimator through the loss
//! matrix, and a pseudo-label source for semi-supervised training.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the synthetic
//! data generator and the command line front end live in the `mrmae` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod baselines;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod importance;
pub mod linalg;
pub mod masking;
pub mod nnet;
pub mod rng;
pub mod semisup;
pub mod shift;
pub mod training;

pub use error::{Error, Result};
