//! Physically guided neural networks with internal variables for 1D
//! steady diffusion: data generation, training, evaluation and sweeps.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod constitutive;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod operators;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
