//! IO companion to [`eesim_core`]: weight-bundle, configuration, LUT, trace
//! and report file formats, plus the scenario runner behind the `eesim`
//! command-line tool.

pub mod files;
pub mod scenario;

/// Errors split by exit code: configuration problems (bad or missing files,
/// invalid settings) exit with 2, runtime failures with 1.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl AppError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<eesim_core::CoreError> for AppError {
    fn from(e: eesim_core::CoreError) -> Self {
        Self::Config(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;
