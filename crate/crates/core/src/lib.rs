pub mod attribution;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod persistence;
pub mod repro;
pub mod training;

pub use error::{Error, Result};
