use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] advex::error::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{what}: {source}")]
    Load {
        what: String,
        source: advex::error::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Name the file or directory a core load failed on.
pub fn loading<T>(what: impl std::fmt::Display, r: advex::error::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Load {
        what: format!("cannot load {what}"),
        source,
    })
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) | CliError::Load { source: e, .. } => match e {
                advex::error::Error::Config(_) => "config",
                advex::error::Error::NonFinite(_) => "non_finite",
                advex::error::Error::Format(_) => "format",
                advex::error::Error::Io(_) => "io",
                _ => "core",
            },
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Invalid(_) => "invalid",
            CliError::Usage(_) => "usage",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
