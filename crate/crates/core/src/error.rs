use thiserror::Error;

/// Errors produced anywhere in the annotation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (limit {limit})")]
    Range { index: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input too degenerate to fit a mixture (e.g. constant values).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// No density crossover strictly between the component means.
    #[error("no crossover root in ({mu_b}, {mu_o})")]
    CrossoverMiss { mu_b: f64, mu_o: f64 },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}: {source}")]
    InBundle { path: String, source: Box<Error> },

    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }
}
