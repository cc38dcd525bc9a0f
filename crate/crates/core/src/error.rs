use thiserror::Error;

/// Errors raised by the estimation core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),
    #[error("item index {item} out of range for {n_items} items")]
    ItemOutOfRange { item: usize, n_items: usize },
    #[error("class index {index} out of range for {count} classes")]
    ClassOutOfRange { index: usize, count: usize },
    #[error("type index {index} out of range for {count} types")]
    TypeOutOfRange { index: usize, count: usize },
    #[error("covariate vector has length {found}, expected {expected}")]
    CovariateLength { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("reference item {item} has zero discrimination")]
    ZeroReferenceDiscrimination { item: usize },
    #[error("parameter set does not match the model: {0}")]
    ParameterShape(String),
    #[error("dataset does not match the model: {0}")]
    DataShape(String),
    #[error("enumeration needs {terms} terms, above the cap of {cap}")]
    EnumerationCap { terms: u128, cap: u128 },
    #[error("non-finite log-likelihood for group {group}")]
    NonFiniteLikelihood { group: usize },
    #[error("Newton-Raphson failed in the {block} block: {reason}")]
    Newton { block: &'static str, reason: String },
    #[error("all {} starts failed: {}", .0.len(), .0.join("; "))]
    AllStartsFailed(Vec<String>),
    #[error("exhaustive label alignment refused for {0} labels (limit 8)")]
    AlignmentTooLarge(usize),
    #[error("invalid fit controls: {0}")]
    InvalidControls(String),
    #[error("invalid simulation design: {0}")]
    InvalidDesign(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{file}, line {line}, column {column}: {message}")]
    Parse {
        file: String,
        line: u64,
        column: String,
        message: String,
    },
    #[error("invalid configuration in {path}: {message}")]
    Config { path: String, message: String },
    #[error("report and dataset disagree: {0}")]
    SpecMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
