use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sampling failed after {attempts} rejected draws: {reason}")]
    SamplingExhausted { attempts: usize, reason: String },

    /// Factorization failed even after the largest diagonal jitter.
    #[error("cholesky factorization failed ({context}); last jitter {jitter:e}")]
    Cholesky { context: String, jitter: f64 },

    /// Every restart of a hyperparameter fit produced a non-finite objective.
    #[error("all {restarts} restarts diverged; best finite log-likelihood {best_log_likelihood:?}")]
    FitDiverged {
        restarts: usize,
        best_log_likelihood: Option<f64>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("provenance violation: {0}")]
    Provenance(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerical machinery rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Cholesky { .. } | Error::FitDiverged { .. } | Error::NonFinite(_) => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
