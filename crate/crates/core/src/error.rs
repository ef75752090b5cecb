use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mismatched extents between source and target grids")]
    MismatchedExtents,
    #[error("degenerate reference: reference field has zero norm")]
    DegenerateReference,
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("packing failure: placed {placed} of {requested} fibers within {attempts} attempts")]
    PackingFailure {
        placed: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("window out of bounds: {0}")]
    WindowOutOfBounds(String),
    #[error("linear solve did not converge: {iterations} iterations, relative residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("manufactured-solution validation failed: observed order {order:.3}")]
    ValidationFailure { order: f64 },
    #[error("non-dyadic resolution: {0}")]
    NonDyadic(String),
    #[error("up block requires a skip input")]
    MissingSkip,
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("local solver failed on subdomain {index}: {source}")]
    LocalSolve {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("sample {index} failed: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
