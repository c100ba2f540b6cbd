use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("label error: row {row} has target {target} but there are only {classes} classes")]
    Label {
        row: usize,
        target: usize,
        classes: usize,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite gradient for parameter `{name}` at element {index}")]
    NonFiniteGradient { name: String, index: usize },
}

pub type Result<T> = std::result::Result<T, NumError>;
