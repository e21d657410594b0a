//! On-demand federated learning simulator with DQN-driven client selection.

pub mod baselines;
pub mod cost;
pub mod data;
pub mod domain;
pub mod dqn;
pub mod env;
pub mod error;
pub mod fl;
pub mod harness;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
