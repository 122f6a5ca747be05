use thiserror::Error;

use crate::event::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("stale or mismatched cache: {0}")]
    StaleCache(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid chain: {}", format_violations(.0))]
    InvalidChain(Vec<Violation>),
    #[error("scenario generation failed: {0}")]
    Generation(String),
    #[error("no structural negative found")]
    NoStructuralNegative,
    #[error("counterfactual not applicable: {0}")]
    Counterfactual(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("event count mismatch: chain over {expected} events, scenario has {got}")]
    EventCount { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            got,
        })
    }
}
