//! Learned hint steering for a cost-based query optimizer.
//!
//! A value network ranks the plans an optimizer produces under each valid
//! hintset and picks the one it predicts to be fastest. Plans come from a
//! deterministic simulator with a tunable gap between estimated and true
//! cardinalities.

pub mod encoding;
pub mod ensemble;
pub mod error;
pub mod experience;
pub mod experiment;
pub mod harness;
pub mod hints;
pub mod model;
pub mod seed;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
