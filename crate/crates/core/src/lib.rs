//! Sequential-learning laboratory: a meta-learned gradient-gating update rule trained
//! against a multi-task teacher, a linear-readout probe for representational forgetting,
//! and the usual baselines (SGD, SGD with a reduced step, EWC, LwF).
//!
//! Everything runs on a small tape-based autodiff engine in `f64`.

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod io;
pub mod meta;
pub mod nets;
pub mod par;
pub mod probe;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
