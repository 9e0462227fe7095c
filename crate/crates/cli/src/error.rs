use std::fmt;

use life_core::key_fragments::FragmentError;
use life_core::metrics_analysis::PipelineError;
use life_core::seq_classifier::ModelError;

use crate::config::Diagnostic;

/// Process exit codes. These values are stable.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const BACKEND: i32 = 5;
}

#[derive(Debug)]
pub enum CliError {
    /// Bad command-line arguments.
    Usage(String),
    /// The config file failed validation.
    Config(Vec<Diagnostic>),
    /// The dataset is missing, malformed or unusable.
    Data(String),
    /// A scoring or classification backend failed or is unreachable.
    Backend(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Backend(_) => exit::BACKEND,
            CliError::Other(_) => exit::OTHER,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Config(diags) => {
                write!(f, "invalid config:")?;
                for d in diags {
                    write!(f, "\n  {d}")?;
                }
                Ok(())
            }
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Backend(m) => write!(f, "backend: {m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Corpus(_)
            | PipelineError::Stats(_)
            | PipelineError::LengthsDiffer(..)
            | PipelineError::Empty(_)
            | PipelineError::UnknownArticle(_) => CliError::Data(msg),
            PipelineError::Scorer { .. } => CliError::Backend(msg),
            PipelineError::Fragment(f) => match f {
                FragmentError::Http(_) | FragmentError::BadProbability(_) => CliError::Backend(msg),
                _ => CliError::Data(msg),
            },
            PipelineError::Model(m) => match m {
                ModelError::SingleClass | ModelError::EmptyFeature | ModelError::NoValidPositions => {
                    CliError::Data(msg)
                }
                _ => CliError::Other(msg),
            },
            PipelineError::UnknownVariant(_) => CliError::Usage(msg),
            PipelineError::Io { .. } => CliError::Other(msg),
        }
    }
}
