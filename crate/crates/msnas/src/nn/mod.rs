//! Minimal tensor-graph machinery: kernels, an autodiff tape, parameter
//! storage, and the two optimizers used in this crate.

pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{randn, ParamKind, ParamStore};
pub use tape::{NodeId, Tape};
