//! Continual-learning mixture of low-rank adapter experts over a frozen
//! encoder, with self-evolving expert pools and task-identity routing.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod model;
pub mod moe;
pub mod pges;
pub mod scee;
pub mod seed;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
