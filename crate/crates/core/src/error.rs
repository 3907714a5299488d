use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or sizes do not satisfy an operation's contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: String, detail: String },

    /// A computation produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("tailoring step {step}: non-finite gradient")]
    TailorStep { step: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Divergence {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("generation failed for trajectory {index}: {reason}")]
    Generation { index: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("validation failed: {0}")]
    Validation(String),

    /// A pipeline stage failed; carries the stage name.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Contract {
            op: op.into(),
            detail: detail.into(),
        }
    }
}

/// Wraps an error with the name of the stage that raised it; already-wrapped
/// errors keep their innermost stage.
pub fn at_stage(stage: impl Into<String>) -> impl FnOnce(Error) -> Error {
    let stage = stage.into();
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    }
}

impl Error {
    /// Stage name for staged errors.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
