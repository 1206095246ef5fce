//! Dynamic topic modelling with a recurrent chain of replicated softmax
//! machines.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod exact_oracle;
pub mod math;
pub mod metrics;
pub mod rng;
pub mod rnn_rsm;
pub mod rsm_core;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
