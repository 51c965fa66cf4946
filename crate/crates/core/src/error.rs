use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("state of nature has no mean for treatment {treatment}, cell {cell}, exposure {exposure}")]
    MissingMean {
        treatment: u8,
        cell: usize,
        exposure: f64,
    },

    #[error("empty stratum: arm {arm}, cell {cell}, treatment {treatment}")]
    EmptyStratum {
        arm: usize,
        cell: usize,
        treatment: u8,
    },

    /// A rule in the grid has no matching arm in the sample.
    #[error("no sampled arm for rule {rule:?}")]
    MissingCell { rule: Vec<f64> },

    #[error("estimates for arms {first} and {second} are tied within tolerance")]
    Tie { first: usize, second: usize },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("vertex enumeration over {variables} mean variables exceeds the 2^24 limit")]
    EnumerationTooLarge { variables: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
