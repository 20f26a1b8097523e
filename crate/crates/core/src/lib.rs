//! Cooperative multi-task learning with flat-minima search.

pub mod baselines;
pub mod coop;
pub mod data;
pub mod error;
pub mod harness;
pub mod network;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
