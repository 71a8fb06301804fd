//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument for {what}: {why}")]
    InvalidArgument { what: &'static str, why: String },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: String, column: String },

    #[error("{path}: duplicate (subject, visit) pair ({subject}, {month}) on rows {row_a} and {row_b}")]
    DuplicateVisit {
        path: String,
        subject: String,
        month: i64,
        row_a: u64,
        row_b: u64,
    },

    #[error("ICV missing or non-positive on records with biomarker data for subjects: {subjects}")]
    MissingIcv { subjects: String },

    #[error("biomarker `{name}` is constant (min == max == {value}); cannot scale")]
    ConstantBiomarker { name: String, value: f64 },

    #[error("non-finite value in {what}{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        what: String,
        context: Option<String>,
    },

    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("model file error in {path}: {why}")]
    ModelFormat { path: String, why: String },

    #[error("LDA covariance not positive definite{}; try a larger shrinkage lambda", detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    SingularCovariance { detail: Option<String> },

    #[error("synthetic cohort config infeasible: {why}")]
    InfeasibleSynthConfig { why: String },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
