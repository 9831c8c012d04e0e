use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category. The CLI maps each class to a fixed exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Provider,
    Sql,
    Data,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Provider => 3,
            ErrorClass::Sql => 4,
            ErrorClass::Data => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed config {path}: {message}")]
    Config { path: String, message: String },

    #[error("database file not found: {0}")]
    MissingDatabase(PathBuf),

    #[error("duplicate {kind} name `{name}`")]
    DuplicateName { kind: &'static str, name: String },

    #[error("invalid virtual table `{spec}`: {message}")]
    InvalidSpec { spec: String, message: String },

    #[error("table `{table}` has no column `{column}`")]
    MissingColumn { table: String, column: String },

    #[error("no such table `{0}`")]
    MissingTable(String),

    #[error("key ({columns}) of `{spec}` is not unique: {duplicates} duplicate key tuple(s), e.g. ({example})")]
    KeyNotUnique {
        spec: String,
        columns: String,
        duplicates: usize,
        example: String,
    },

    #[error("key ({columns}) of `{spec}` contains NULL or empty values in {rows} row(s)")]
    NullKey {
        spec: String,
        columns: String,
        rows: usize,
    },

    #[error("sql syntax error: {0}")]
    SqlSyntax(String),

    #[error("unsupported sql: {0}")]
    UnsupportedSql(String),

    #[error("unknown relation `{0}`: not a base table or virtual table")]
    UnresolvedRelation(String),

    #[error("cache table `{table}` for virtual table `{spec}` has not been materialized")]
    MissingCache { table: String, spec: String },

    #[error("sql execution failed: {0}")]
    Execution(String),

    #[error("few-shot count {k} exceeds the example pool of `{spec}` ({pool})")]
    FewShotTooLarge { spec: String, k: usize, pool: usize },

    #[error("prompt for `{0}` has no target rows")]
    NoTargets(String),

    #[error("provider transport failure: {0}")]
    Transport(String),

    #[error("provider returned status {status}: {body}")]
    ProviderStatus { status: u16, body: String },

    #[error("no mock fixture for spec `{spec}` k={k} keys {keys}")]
    FixtureMiss { spec: String, k: usize, keys: String },

    #[error("value `{0}` contains a comma and cannot be condensed")]
    EmbeddedComma(String),

    #[error("gold store for `{spec}` has no entry for cached key ({key})")]
    GoldMissingKey { spec: String, key: String },

    #[error("{0} requires at least one case")]
    NoCases(&'static str),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config { .. } | MissingDatabase(_) | DuplicateName { .. } | InvalidSpec { .. }
            | FewShotTooLarge { .. } | Io { .. } => ErrorClass::Config,
            Transport(_) | ProviderStatus { .. } | FixtureMiss { .. } => ErrorClass::Provider,
            SqlSyntax(_) | UnsupportedSql(_) | UnresolvedRelation(_) | MissingCache { .. }
            | Execution(_) | Sqlite(_) => ErrorClass::Sql,
            MissingColumn { .. } | MissingTable(_) | KeyNotUnique { .. } | NullKey { .. }
            | NoTargets(_) | EmbeddedComma(_) | GoldMissingKey { .. } | NoCases(_) | Data(_)
            | Json(_) => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, message: impl ToString) -> Self {
        Error::Config {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
