//! GFlowNet toolkit: vectorized discrete-construction environments,
//! trajectory/detailed-balance objectives on a small MLP kernel, exact
//! enumeration oracles and evaluation metrics.

pub mod buffer;
pub mod config;
pub mod env;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
pub use rng::RngKey;
