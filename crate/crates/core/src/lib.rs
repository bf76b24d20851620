pub mod baselines;
pub mod cli;
pub mod constraints;
pub mod dynamics;
pub mod enks;
pub mod learning;
pub mod error;
pub mod mlp;
pub mod planner;
pub mod road;
pub mod scenario;
pub mod virtual_system;

pub use error::{Error, Result};
