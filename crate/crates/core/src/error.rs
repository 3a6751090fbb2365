use std::path::PathBuf;

/// Errors raised anywhere in the lesion-uncertainty pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix the message with `ctx`, keeping the error class.
    pub fn with_context(self, ctx: &str) -> Self {
        use Error::*;
        match self {
            Format(m) => Format(format!("{ctx}: {m}")),
            Shape(m) => Shape(format!("{ctx}: {m}")),
            Data(m) => Data(format!("{ctx}: {m}")),
            Input(m) => Input(format!("{ctx}: {m}")),
            Model(m) => Model(format!("{ctx}: {m}")),
            Training(m) => Training(format!("{ctx}: {m}")),
            Fit(m) => Fit(format!("{ctx}: {m}")),
            Evaluation(m) => Evaluation(format!("{ctx}: {m}")),
            Report(m) => Report(format!("{ctx}: {m}")),
            Generation(m) => Generation(format!("{ctx}: {m}")),
            Config(m) => Config(format!("{ctx}: {m}")),
            e @ Io { .. } => e,
        }
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 numeric/training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format(_)
            | Error::Shape(_)
            | Error::Data(_)
            | Error::Input(_)
            | Error::Generation(_)
            | Error::Io { .. } => 3,
            Error::Model(_)
            | Error::Training(_)
            | Error::Fit(_)
            | Error::Evaluation(_)
            | Error::Report(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
