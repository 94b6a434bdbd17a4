//! Search for multi-stage (early-exit) CNN architectures for dynamic
//! inference, end to end: multi-stage convolution primitives, a once-for-all
//! supernet with sub-network sampling, supernet training with per-stage
//! distillation, exact cost accounting (MACs and latency tables), an offline
//! confidence database with threshold grid search, an architecture-to-metric
//! predictor, and evolutionary search.

pub mod checkpoint;
pub mod data;
pub mod dyninfer;
pub mod error;
pub mod evaldb;
pub mod evo;
pub mod ms_ops;
pub mod naive;
pub mod nn;
pub mod predictor;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
