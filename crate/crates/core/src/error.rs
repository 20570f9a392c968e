use std::fmt;

use thiserror::Error;

/// Coarse error classes. The CLI maps these onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numeric,
    Io,
}

/// A single offending row found while ingesting a data file.
#[derive(Debug, Clone, PartialEq)]
pub struct RowIssue {
    /// 1-based data row (the header is row 0).
    pub row: usize,
    pub message: String,
}

impl fmt::Display for RowIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.message)
    }
}

fn join_issues(issues: &[RowIssue]) -> String {
    issues
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample has no uncensored event times; H is not estimable")]
    NotEstimable,

    #[error("ingestion failed: {}", join_issues(.0))]
    Ingest(Vec<RowIssue>),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(
        "profile equation has no finite root at event time {time} (event {index}); \
         consider an administrative cutoff tau below this time"
    )]
    TailDivergence { time: f64, index: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("extrapolation failure: {0}")]
    Extrapolation(String),

    #[error("variance estimation failure: {0}")]
    Variance(String),

    #[error("degenerate risk set at event time {0}")]
    DegenerateRisk(f64),

    #[error("SIMEX failed: {failed} of {total} fits did not converge (worst zeta = {worst_zeta})")]
    SimexConvergence {
        failed: usize,
        total: usize,
        worst_zeta: f64,
    },

    #[error(
        "censoring target {target} is infeasible: achievable rates lie in \
         [{floor:.4}, {ceiling:.4}] for c in [1e-3, 1e3]"
    )]
    CensoringInfeasible {
        target: f64,
        floor: f64,
        ceiling: f64,
    },

    #[error("generator accepted only {accepted} of {requested} subjects after {proposals} proposals")]
    DegenerateTruncation {
        accepted: usize,
        requested: usize,
        proposals: usize,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Domain(_)
            | Error::Config(_)
            | Error::NotEstimable
            | Error::Ingest(_)
            | Error::Schema(_)
            | Error::CensoringInfeasible { .. }
            | Error::DegenerateTruncation { .. } => ErrorClass::Validation,
            Error::TailDivergence { .. }
            | Error::Numeric(_)
            | Error::Extrapolation(_)
            | Error::Variance(_)
            | Error::DegenerateRisk(_)
            | Error::SimexConvergence { .. } => ErrorClass::Numeric,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => ErrorClass::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
