use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("experiment `{0}` is stochastic and needs a seed (config `seed` or --seed)")]
    MissingSeed(String),

    #[error("unknown experiment `{name}`; available: {available}")]
    UnknownExperiment { name: String, available: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Core(#[from] sicthermo::Error),
}

impl CliError {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        CliError::Invalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Stable, machine-readable error class.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Invalid { .. } => "invalid_config",
            CliError::MissingSeed(_) => "missing_seed",
            CliError::UnknownExperiment { .. } => "unknown_experiment",
            CliError::Io { .. } => "io",
            CliError::Csv { .. } => "csv",
            CliError::Core(e) => e.class(),
        }
    }

    /// Process exit status: 2 for bad input, 1 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_)
            | CliError::Invalid { .. }
            | CliError::MissingSeed(_)
            | CliError::UnknownExperiment { .. } => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": self.class(),
            "message": self.to_string(),
        })
    }
}
