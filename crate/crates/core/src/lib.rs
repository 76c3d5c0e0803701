//! Masked generative sampling over small token grids: fixed, revocable and
//! learned re-masking strategies, with exact toy worlds for evaluation.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod generator;
pub mod grid;
pub mod metrics;
pub mod neuralgen;
pub mod nn;
pub mod sampling;
pub mod selector;
pub mod tasks;
pub mod toyworld;

pub use error::{Error, Result};
