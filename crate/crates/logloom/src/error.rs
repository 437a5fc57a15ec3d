use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Which structural guard an edit script tripped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guard {
    /// Node graph is no longer a tree (orphans, cycles, dangling children,
    /// invalid tokens, childless non-leaves).
    Tree,
    /// The set of corpus lines matched by the tree changed.
    MatchSet,
    /// Field names are no longer unique, or a field reference is inconsistent.
    FieldUnique,
    /// A mapping cites an attribute missing from the known taxonomy.
    AttributeExists,
    /// A field carries more mapped attributes than the configured cap.
    MappingCap,
    /// A command touched an item outside the batch's mutable set.
    Frozen,
}

impl std::fmt::Display for Guard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Guard::Tree => "tree",
            Guard::MatchSet => "match-set",
            Guard::FieldUnique => "field-uniqueness",
            Guard::AttributeExists => "attribute-exists",
            Guard::MappingCap => "mapping-cap",
            Guard::Frozen => "frozen",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("token {index}: {message}")]
    Compile { index: usize, message: String },

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("parse: {0}")]
    Parse(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("provider {provider}: {message}")]
    Provider { provider: String, message: String },

    #[error("cache: {0}")]
    Cache(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("repair exhausted after {iters} attempts; last diagnostic: {last}")]
    RepairExhausted { iters: usize, last: String },

    #[error("zero coverage: {0}")]
    ZeroCoverage(String),

    #[error("name collision: field {name:?} is already registered with a different description")]
    NameCollision { name: String },

    #[error("guard violation at command {command} ({guard}): {message}")]
    GuardViolation {
        command: usize,
        guard: Guard,
        message: String,
    },

    #[error("input: {0}")]
    Input(String),

    #[error("query: {0}")]
    Query(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Failures a repair loop may feed back to the model as a diagnostic.
    /// Everything else (I/O, provider transport, cache corruption) aborts.
    pub fn is_repairable(&self) -> bool {
        matches!(
            self,
            Error::Compile { .. }
                | Error::Parse(_)
                | Error::UnknownId(_)
                | Error::ZeroCoverage(_)
                | Error::NameCollision { .. }
                | Error::GuardViolation { .. }
        )
    }
}
