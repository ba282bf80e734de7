//! Bandit-routed representation transfer between small dense networks,
//! with a reproducible sine -> sinc experiment harness.

pub mod bandit;
pub mod bytes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod numgrad;
pub mod routing;
pub mod transfer;

pub use error::{Error, Result};
