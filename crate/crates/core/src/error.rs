use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate linear family: {0}")]
    DegenerateFamily(String),
    #[error("sample pool lacks class {class} (needed {needed}, available {available})")]
    InsufficientPool { class: usize, needed: usize, available: usize },
    #[error("IDX format error in {path} at byte {offset}: {reason}")]
    Format { path: PathBuf, offset: u64, reason: String },
    #[error("divergence at local iteration {iteration}{}", client.map(|c| format!(" on client {c}")).unwrap_or_default())]
    Divergence { client: Option<usize>, iteration: usize },
    #[error("moment matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    Singular { condition: f64 },
    #[error("incomplete half-distance protocol, missing ordered pairs {missing:?}")]
    IncompleteProtocol { missing: Vec<(usize, usize)> },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configs are not comparable: {0}")]
    Comparability(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }

    /// Prefix the key path of a config error with the enclosing section.
    pub(crate) fn in_section(self, section: &str) -> Self {
        match self {
            Error::Config { key, reason } => Error::Config { key: format!("{section}.{key}"), reason },
            other => other,
        }
    }

    /// Attach a client id to a divergence error coming out of local training.
    pub(crate) fn with_client(self, client_id: usize) -> Self {
        match self {
            Error::Divergence { iteration, .. } => Error::Divergence { client: Some(client_id), iteration },
            other => other,
        }
    }
}
