use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Malformed partitions, graphs or mismatched dimensions.
    #[error("structural error: {0}")]
    Structure(String),
    /// Inadmissible constants or step parameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numerical check could not be carried out.
    #[error("diagnostic error: {0}")]
    Diagnostic(String),
    #[error("diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
