//! Desk-scale laboratory for consistency distillation of a miniature
//! class-conditional diffusion transformer, with DDIM and few-step
//! consistency sampling, control adapters, schedule diagnostics, and
//! latency benchmarking.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod schedule;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{AdamW, Rng, Tensor};
