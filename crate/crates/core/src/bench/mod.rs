//! Benchmark harness: curation, suites, oracle fixtures and suite runs.

pub mod curate;
pub mod fixtures;
pub mod runner;
pub mod suite;

pub use curate::{curate, write_curation, Curation, CurationManifest, CurationOutputs};
pub use fixtures::{oracle_fixtures, oracle_line};
pub use runner::{run_suite, EngineConfig, FillOutcome, HybridEngine, QueryOutcome, SuiteRun};
pub use suite::{BenchmarkCase, Suite, SuiteDatabase};
