use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, indices or values was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A distribution had no finite mass to normalize.
    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    /// Brute-force enumeration was asked to visit too many sequences.
    #[error("instance too large for enumeration: {k}^{t} sequences exceeds {limit}")]
    TooLarge { k: usize, t: usize, limit: u64 },

    /// A model or generator configuration is unusable for the request.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed instance, checkpoint or report data.
    #[error("{0}")]
    Schema(String),

    /// A loss or gradient became NaN during training.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches `path` to an I/O error.
pub(crate) fn at_path(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
