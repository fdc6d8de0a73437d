//! Meta active learning: a learned pool-based selection policy trained with
//! policy gradients, a recurrent controller, and matching-network style
//! prediction over the labeled part of the pool.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod encoders;
pub mod episodes;
pub mod error;
pub mod model;
pub mod policy;
pub mod predictors;
pub mod session;
pub mod training;

pub use error::{Error, Result};
