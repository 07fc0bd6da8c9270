use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(#[from] swattn::ConfigError),
    #[error("config file: {0}")]
    ConfigFile(String),
    #[error(transparent)]
    Core(#[from] swattn::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("operation counts differ between repetitions of {mode} at n = {n}")]
    UnstableCounts { mode: String, n: usize },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const TOLERANCE_BREACH: i32 = 1;
    pub const USAGE: i32 = 2;
}
