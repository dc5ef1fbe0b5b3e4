use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator and its aggregation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed a value outside an operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An experiment or partition configuration cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary data file does not follow the IDX layout.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    /// A loss became NaN or infinite during optimization.
    #[error("divergence in {stage}{}: non-finite loss {loss} at step {step}", round_suffix(.round))]
    Divergence {
        stage: &'static str,
        round: Option<usize>,
        step: usize,
        loss: f64,
    },

    /// An attack cannot be fabricated in the current round.
    #[error("attack inapplicable: {0}")]
    AttackInapplicable(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn round_suffix(round: &Option<usize>) -> String {
    match round {
        Some(r) => format!(" (round {r})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a communication-round index to a divergence error.
    pub fn in_round(self, t: usize) -> Self {
        match self {
            Error::Divergence {
                stage, step, loss, ..
            } => Error::Divergence {
                stage,
                round: Some(t),
                step,
                loss,
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
