//! Digital-twin synchronization over an RB-constrained uplink, with a
//! constrained soft actor-critic scheduler and classical baselines.

pub mod agent;
pub mod approx;
pub mod baselines;
pub mod channel;
pub mod env;
pub mod error;
pub mod harness;
pub mod replay;
pub mod traces;

pub use error::{Error, Result};
