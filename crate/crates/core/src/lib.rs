//! Spiking transformer with aggregated spike self-attention.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod network;
pub mod numerics;
pub mod profiler;
pub mod spiking;
pub mod training;

pub use error::{Error, Result};
