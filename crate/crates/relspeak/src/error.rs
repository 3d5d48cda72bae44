use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("softmax over an empty axis")]
    EmptySoftmaxAxis,

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("dataset line {line}: {msg}")]
    DataFormat { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_str(shape: &[usize]) -> String {
    format!(
        "[{}]",
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    )
}
