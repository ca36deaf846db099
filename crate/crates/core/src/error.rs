use thiserror::Error;

use crate::model::Direction;

/// Errors produced by the scheduling library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("module {module}: infeasible {direction:?} step (soc {soc:.9} -> {next:.9}, bounds [{min}, {max}])")]
    InfeasibleStep {
        module: String,
        direction: Direction,
        soc: f64,
        next: f64,
        min: f64,
        max: f64,
    },

    #[error("problem construction failed: {0}")]
    Construction(String),

    #[error("activation assignment is missing {} entries: {}", .0.len(), format_missing(.0))]
    MissingActivations(Vec<(String, usize)>),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: value {value} outside [-1, 1]")]
    OutOfRange { line: usize, value: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_missing(missing: &[(String, usize)]) -> String {
    missing
        .iter()
        .map(|(m, t)| format!("({m}, {t})"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
