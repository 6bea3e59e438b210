//! Replayable lakehouse engine.
//!
//! The crate is layered bottom-up:
//!
//! * [`object_store`]: immutable blob storage over a local directory, with
//!   compare-and-set for mutable refs.
//! * [`table`]: canonical CSV data files and content-addressed table snapshots.
//! * [`catalog`]: Git-style commits over table snapshots, branches, merges.
//! * [`sql`]: the SQL subset used by pipeline steps and ad-hoc queries.
//! * [`pipeline`]: loads a project directory into a DAG of steps.
//! * [`runtime`]: plans and executes a run, landing outputs in one commit.
//! * [`run_store`]: immutable run manifests and code snapshots for replay.

pub mod canonical;
pub mod catalog;
mod error;
pub mod object_store;
pub mod pipeline;
pub mod run_store;
pub mod runtime;
pub mod sql;
pub mod table;

pub use error::{Error, ErrorClass, Result};
