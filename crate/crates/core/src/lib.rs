//! Pattern-based pruning and pattern-specialized sparse convolution for small CNNs.

pub mod admm;
pub mod bench;
pub mod error;
pub mod exec;
pub mod fkw;
pub mod io;
pub mod lr;
pub mod pattern;
pub mod pipeline;
pub mod reorder;
pub mod synth;
pub mod tensor;
pub mod tune;

pub use error::{Error, Result, Violation};
