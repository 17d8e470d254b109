//! Hierarchical sparse expert routing.
//!
//! Experts are grouped by the device that hosts them. A token first picks
//! one group, then `k` experts inside it, so cross-device traffic per token
//! does not grow with `k`. The crate provides the routers, the sparse layer
//! with manual backpropagation, the alignment and load-balance losses, a
//! deterministic expert-parallel communication simulator and a toy-scale
//! training harness.

pub mod error;
pub mod harness;
pub mod layer;
pub mod losses;
pub mod routers;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
