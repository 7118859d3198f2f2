//! Sparse training and plasticity diagnostics for multi-task PPO agents on
//! small partially observable gridworlds.

pub mod arch;
pub mod autodiff;
pub mod envs;
pub mod error;
pub mod evalstats;
pub mod exp;
pub mod plasticity;
pub mod ppo;
pub mod sparsity;

pub use error::{Error, Result};
