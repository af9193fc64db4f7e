use thiserror::Error;

use crate::data::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("range error: {0}")]
    Range(String),

    #[error("no events: every subject is censored")]
    NoEvents,

    #[error("empty dataset")]
    Empty,

    #[error("invalid dataset: {}", format_violations(.0))]
    InvalidData(Vec<Violation>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bootstrap failed: only {converged} of {requested} replicates converged")]
    Bootstrap { converged: usize, requested: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("subject {subject}: {message}")]
    Record { subject: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
