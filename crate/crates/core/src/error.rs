use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input {0} contains no interactions")]
    EmptyInput(PathBuf),
    #[error("user {0} has interacted with every item; no negatives can be drawn")]
    CatalogueExhausted(usize),
    #[error("node {0} has no neighbors")]
    IsolatedNode(usize),
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("missing config key `{0}`")]
    MissingConfigKey(String),
    #[error("invalid config value for `{key}`: {message}")]
    InvalidConfig { key: String, message: String },
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("non-finite loss {loss} at batch {batch} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("no evaluation instances")]
    NoEvalInstances,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}
