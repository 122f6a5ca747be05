//! Event-grounded reasoning chains checked by a hybrid differentiable
//! logic verifier, trained on a synthetic event-stream world with planted
//! causal structure.

pub mod error;
pub mod event;
pub mod cli;
pub mod diagnostics;
pub mod evaluation;
pub mod eventifier;
pub mod experiment;
pub mod generator;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod pipeline;
pub mod trainer;
pub mod verifier;
pub mod world;

pub use error::{Error, Result};
