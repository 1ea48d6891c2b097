use thiserror::Error;

/// Errors raised anywhere in the grounding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate vector: norm {norm:e} is below {min:e}")]
    DegenerateVector { norm: f64, min: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate pooling: pooled norm {norm:e}{}", step_suffix(*.step))]
    DegeneratePooling { norm: f64, step: Option<usize> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimization diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("combinatorial guard exceeded: {0}")]
    TooLarge(String),

    #[error("could not parse decomposition: {0}")]
    Parse(String),

    #[error("language partition unavailable: {0}")]
    LspUnavailable(String),

    #[error("validation error at {pointer}: {message}")]
    Validation { pointer: String, message: String },

    #[error("evaluation input error: {0}")]
    EvalInput(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(s) => format!(" at step {s}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn validation(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    /// Attach an optimizer step to a pooling failure.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::DegeneratePooling { norm, .. } => Error::DegeneratePooling {
                norm,
                step: Some(step),
            },
            Error::Numerical(msg) => Error::Numerical(format!("step {step}: {msg}")),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
