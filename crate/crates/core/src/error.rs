use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("skip-BN branch requires a shape-preserving stage (stride {stride}, {in_channels} -> {out_channels} channels)")]
    IllegalSkip {
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    },

    #[error("batchnorm running statistics are not populated; calibrate or train the model before re-parameterizing")]
    UnpopulatedStats,

    #[error("unknown variant `{name}`; valid variants: {valid}")]
    UnknownVariant { name: String, valid: String },

    #[error("operation requires a {expected} model but got a {actual} model")]
    WrongMode {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}: {value}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error("runner failed at iteration {iteration}: {source}")]
    Runner {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("container format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Error {
    Error::Shape {
        op,
        dim,
        expected,
        actual,
    }
}

pub(crate) fn ensure_dim(
    op: &'static str,
    dim: &'static str,
    expected: usize,
    actual: usize,
) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(shape_err(op, dim, expected, actual))
    }
}
