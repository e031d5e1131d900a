use std::path::PathBuf;

use thiserror::Error;

/// Per-tier shortfall reported when a placement cannot fit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierDeficit {
    pub tier: &'static str,
    pub needed: u64,
    pub available: u64,
}

impl std::fmt::Display for TierDeficit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: need {} B, have {} B (short {} B)",
            self.tier,
            self.needed,
            self.available,
            self.needed.saturating_sub(self.available)
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{what} out of range: {index} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("memory infeasible: {}", fmt_deficits(.0))]
    MemoryInfeasible(Vec<TierDeficit>),

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("deadlock: ops waiting in a cycle: {0:?}")]
    Deadlock(Vec<usize>),

    #[error("parse error in {path} at record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_deficits(d: &[TierDeficit]) -> String {
    d.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
