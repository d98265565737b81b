//! Incentive market for dynamic power grids: a linear stochastic grid model,
//! agent best responses, reward design through the principal's value function,
//! Monte Carlo verification of the resulting market, and scenario runners.

pub mod config;
pub mod error;
pub mod hjb;
pub mod instances;
pub mod market;
pub mod model;
pub mod response;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
