//! Core of the length-generalization lab: a limit-transformer engine with
//! finite- and infinite-precision attention, analyzers for margins and
//! Lipschitz-type constants, simulation-string builders, and the synthetic
//! tasks together with hand-built models that solve them.

pub mod analyzers;
pub mod error;
pub mod linalg;
pub mod lt;
pub mod random;
pub mod rng;
pub mod simulators;
pub mod tasks;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use lt::{Activation, HeadParams, Layer, LtParams, MlpParams, PrecisionMode, TokenSeq};
