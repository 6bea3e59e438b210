use thiserror::Error;

use crate::catalog::CatalogError;
use crate::object_store::StoreError;
use crate::pipeline::PipelineError;
use crate::run_store::RunStoreError;
use crate::runtime::RuntimeError;
use crate::sql::SqlError;
use crate::table::TableError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Any error the engine can surface, grouped by subsystem.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    RunStore(#[from] RunStoreError),
}

/// Whether an error is the caller's fault or the system's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    User,
    System,
}

impl Error {
    /// Stable error name, used as the CLI's `error[Name]` prefix.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Store(e) => e.name(),
            Error::Table(e) => e.name(),
            Error::Catalog(e) => e.name(),
            Error::Sql(e) => e.name(),
            Error::Pipeline(e) => e.name(),
            Error::Runtime(e) => e.name(),
            Error::RunStore(e) => e.name(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self.name() {
            "IoFailure" | "Corrupt" | "CorruptFile" | "CorruptManifest" | "CorruptCodeSnapshot" | "EncodingError"
            | "MissingInputCommit" | "StorageFailure" | "ImmutableOverwrite" | "NotMutable" => ErrorClass::System,
            _ => ErrorClass::User,
        }
    }
}
