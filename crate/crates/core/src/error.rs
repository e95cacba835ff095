use std::path::PathBuf;

/// Errors surfaced by every stage of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("ingestion error: {unresolved} of {total} locators could not be resolved")]
    Ingestion { unresolved: usize, total: usize },

    #[error("empty bank")]
    EmptyBank,

    #[error("incomplete labeling: missing labels for {missing:?}")]
    IncompleteLabeling { missing: Vec<String> },

    #[error("incomplete review: {pending} candidates still pending")]
    IncompleteReview { pending: usize },

    #[error("too many skipped images: {skipped} of {total}")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("unknown session `{0}`")]
    UnknownSession(String),

    #[error("unknown logo `{0}`")]
    UnknownLogo(String),

    #[error("report mismatch: {0}")]
    Mismatch(String),

    #[error("image `{id}`: {source}")]
    Image {
        id: String,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Backend(_) => "backend",
            Error::Policy(_) => "policy",
            Error::Ingestion { .. } => "ingestion",
            Error::EmptyBank => "empty_bank",
            Error::IncompleteLabeling { .. } => "incomplete_labeling",
            Error::IncompleteReview { .. } => "incomplete_review",
            Error::TooManySkipped { .. } => "too_many_skipped",
            Error::UnknownSession(_) => "unknown_session",
            Error::UnknownLogo(_) => "unknown_logo",
            Error::Mismatch(_) => "mismatch",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
