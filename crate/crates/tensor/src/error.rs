use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: dimension mismatch on {axis} (expected {expected}, got {actual})")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{op}: non-finite value at time step {step}")]
    NonFinite { op: &'static str, step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("label index {index} out of range for {classes} classes")]
    Index { index: usize, classes: usize },

    #[error("weight container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn check_dim(
    op: &'static str,
    axis: &'static str,
    expected: usize,
    actual: usize,
) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(NnError::Dimension {
            op,
            axis,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() == rank {
        Ok(())
    } else {
        Err(NnError::Shape {
            op,
            msg: format!("expected rank {rank}, got shape {shape:?}"),
        })
    }
}
