//! Label distribution learning with an implicit distribution representation.
//!
//! The crate is organized bottom-up: [`autodiff`] provides the dense
//! reverse-mode engine, [`data`] the datasets and augmentation, [`model`] the
//! network, [`objectives`] the training losses, [`metrics`] the six LDL
//! measures, [`trainer`] optimization and cross-validation, [`baseline`] the
//! maximum-entropy quasi-Newton comparator and [`snn`] the spiking
//! conversion with energy accounting. [`cli`] wires them into the `ildl`
//! binary.

pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod snn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
