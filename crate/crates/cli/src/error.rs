//! Error classes and their exit codes.

use std::fmt;
use std::path::Path;

use atomotion::align::AlignError;
use atomotion::decompose::DecomposeError;
use atomotion::generative::GenerateError;
use atomotion::llm::LlmError;
use atomotion::matrix_io::MatrixIoError;
use atomotion::metrics::MetricsError;
use atomotion::motion::MotionError;
use atomotion::rvq::RvqError;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_MOTION: u8 = 4;
pub const EXIT_DECOMPOSE: u8 = 5;
pub const EXIT_TOKENIZER: u8 = 6;
pub const EXIT_ALIGN: u8 = 7;
pub const EXIT_LLM: u8 = 8;
pub const EXIT_GENERATE: u8 = 9;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub class: &'static str,
    pub message: String,
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        let class = match code {
            EXIT_USAGE => "usage",
            EXIT_IO => "io",
            EXIT_MOTION => "motion",
            EXIT_DECOMPOSE => "decompose",
            EXIT_TOKENIZER => "tokenizer",
            EXIT_ALIGN => "align",
            EXIT_LLM => "llm",
            _ => "generate",
        };
        CliError {
            code,
            class,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{}: {err}", path.display()))
    }

    /// Prefix the message with the file it concerns.
    pub fn at(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}:{}] {}", self.code, self.class, self.message)
    }
}

impl From<MotionError> for CliError {
    fn from(e: MotionError) -> Self {
        let code = if matches!(e, MotionError::Io(_)) { EXIT_IO } else { EXIT_MOTION };
        Self::new(code, e.to_string())
    }
}

impl From<DecomposeError> for CliError {
    fn from(e: DecomposeError) -> Self {
        Self::new(EXIT_DECOMPOSE, e.to_string())
    }
}

impl From<RvqError> for CliError {
    fn from(e: RvqError) -> Self {
        let code = if matches!(e, RvqError::Io(_)) { EXIT_IO } else { EXIT_TOKENIZER };
        Self::new(code, e.to_string())
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        let code = if matches!(e, AlignError::Io(_)) { EXIT_IO } else { EXIT_ALIGN };
        Self::new(code, e.to_string())
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        Self::new(EXIT_LLM, e.to_string())
    }
}

impl From<GenerateError> for CliError {
    fn from(e: GenerateError) -> Self {
        let code = if matches!(e, GenerateError::Io(_)) { EXIT_IO } else { EXIT_GENERATE };
        Self::new(code, e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::new(EXIT_GENERATE, e.to_string())
    }
}

impl From<MatrixIoError> for CliError {
    fn from(e: MatrixIoError) -> Self {
        Self::new(EXIT_IO, e.to_string())
    }
}
