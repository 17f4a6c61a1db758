use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;
use crate::engine::EngineError;
use crate::strip::StripError;
use crate::synth::SynthError;

/// Broad failure class, e.g. for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Strip(#[from] StripError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("trajectory {trajectory}: singular normal equations at anchor {anchor}")]
    SingularChain { trajectory: u32, anchor: u32 },
    #[error("trajectory {trajectory}: non-finite correction update")]
    NonFinite { trajectory: u32 },
    #[error("malformed {what} {path}: {reason}")]
    Format { what: &'static str, path: PathBuf, reason: String },
    #[error("{0}")]
    Input(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Self::SingularChain { .. } | Self::NonFinite { .. } => ErrorClass::Numerical,
            Self::Io { .. } | Self::Strip(StripError::Io(_)) | Self::Synth(SynthError::Io(_)) => ErrorClass::Io,
            Self::Engine(EngineError::Io(_)) => ErrorClass::Io,
            _ => ErrorClass::Input,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
