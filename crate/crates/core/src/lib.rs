pub mod baselines;
pub mod bidders;
pub mod config;
pub mod domain;
pub mod env;
pub mod error;
pub mod experiment;
pub mod hier;
pub mod nn;
pub mod ppo;
pub mod replay;
pub mod rng;
pub mod runner;
pub mod simenv;
pub mod stats;

pub use error::{Error, Result};
