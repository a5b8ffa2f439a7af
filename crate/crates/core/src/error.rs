use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid parameter `{name}`: {detail}")]
    Param { name: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),
    #[error("unsupported mode: {0}")]
    Unsupported(&'static str),
    #[error("infeasible config: {0}")]
    Config(String),
    #[error("unknown {kind} {value:?}")]
    Vocabulary { kind: &'static str, value: String },
    #[error("run diverged at epoch {epoch}, batch {batch} (loss {loss:e})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Param {
            name,
            detail: detail.into(),
        }
    }
}
