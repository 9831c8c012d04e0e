//! Hybrid SQL over SQLite base tables and language-model virtual tables.
//!
//! A query names virtual tables declared in a [`catalog::Catalog`]. The
//! engine plans which key tuples the query needs, asks a provider for the
//! missing rows, stores them in `llm_cache_<spec>` tables, rewrites the
//! query onto those tables and runs it. The [`bench`] module scores runs
//! for execution accuracy, data factuality and token cost.

pub mod bench;
pub mod catalog;
pub mod error;
pub mod evaluator;
pub mod executor;
pub mod generation;
pub mod materializer;
pub mod sql_frontend;

pub use bench::{run_suite, EngineConfig, HybridEngine, Suite};
pub use catalog::{AttributeSpec, Cardinality, Catalog, DatabaseHandle, ValueDomain, VirtualTableSpec};
pub use error::{Error, ErrorClass, Result};
pub use evaluator::MetricsReport;
pub use executor::{Cell, ResultTable};
pub use generation::{KeyTuple, PlanMode, Provider, ProviderConfig, ProviderMode};
pub use sql_frontend::HybridQueryAst;
