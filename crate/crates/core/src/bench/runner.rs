//! The query pipeline and suite runs.

use std::collections::{BTreeMap, BTreeSet};

use crate::bench::suite::Suite;
use crate::catalog::{Catalog, DatabaseHandle, VirtualTableSpec};
use crate::error::{Error, Result};
use crate::evaluator::{
    cost_report, execution_accuracy, factuality_report, CaseResult, MetricsReport, RunSettings,
    REPORT_FORMAT_VERSION,
};
use crate::executor::{compare_results, execute_sql, ResultTable};
use crate::generation::{generate, plan_keys, GenerationOptions, KeyTuple, MeteredProvider, PlanMode, Provider, ProviderConfig};
use crate::materializer::{
    cache_lookup, materialize_outcomes, requests_for_keys, MaterializeSummary, ProvenanceFilter, Rejection,
};
use crate::sql_frontend::{parse_hybrid, rewrite_to_cache};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub provider: ProviderConfig,
    pub mode: PlanMode,
    pub k: usize,
}

/// What filling one spec's cache for a set of keys took.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FillOutcome {
    pub hits: usize,
    pub misses: usize,
    pub invocations: usize,
    pub failed_keys: Vec<KeyTuple>,
    pub materialized: MaterializeSummary,
}

impl FillOutcome {
    fn absorb(&mut self, other: FillOutcome) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.invocations += other.invocations;
        self.failed_keys.extend(other.failed_keys);
        self.materialized.absorb(other.materialized);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub result: ResultTable,
    pub rewritten_sql: String,
    /// Keys planned per spec.
    pub planned: BTreeMap<String, Vec<KeyTuple>>,
    pub fill: FillOutcome,
}

/// Runs hybrid queries: plan keys, generate what the cache lacks,
/// materialize, rewrite and execute.
pub struct HybridEngine<'a> {
    catalog: &'a Catalog,
    provider: &'a dyn Provider,
    config: EngineConfig,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl<'a> HybridEngine<'a> {
    pub fn new(catalog: &'a Catalog, provider: &'a dyn Provider, config: EngineConfig) -> Self {
        HybridEngine { catalog, provider, config }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn filter(&self) -> ProvenanceFilter {
        ProvenanceFilter {
            model_id: self.provider.model_id().to_string(),
            k: self.config.k,
        }
    }

    /// Makes sure every key has a cached row for the configured model and k,
    /// generating only the misses. The cache table exists afterwards even
    /// when nothing was generated.
    pub fn fill(&self, spec: &VirtualTableSpec, db: &DatabaseHandle, keys: &[KeyTuple]) -> Result<FillOutcome> {
        let split = cache_lookup(spec, keys, db, Some(&self.filter()))?;
        let opts = GenerationOptions {
            k: self.config.k,
            batch_size: self.config.provider.batch_size,
            concurrency: self.config.provider.concurrency,
        };
        let run = generate(spec, &split.misses, self.provider, opts)?;
        let materialized = materialize_outcomes(&run.outcomes, spec, db, self.provider.model_id(), &now())?;
        if !run.failed_keys.is_empty() {
            tracing::warn!(spec = %spec.name, keys = run.failed_keys.len(), "generation failed for some keys");
        }
        Ok(FillOutcome {
            hits: split.hits.len(),
            misses: split.misses.len(),
            invocations: run.invocations(),
            failed_keys: run.failed_keys,
            materialized,
        })
    }

    fn database(&self, id: &str) -> Result<&'a DatabaseHandle> {
        self.catalog
            .database(id)
            .ok_or_else(|| Error::config("catalog", format!("unknown database `{id}`")))
    }

    /// Parses `sql` and plans keys for every virtual table it references.
    pub fn plan(&self, database: &str, sql: &str) -> Result<(crate::sql_frontend::HybridQueryAst, BTreeMap<String, Vec<KeyTuple>>)> {
        let db = self.database(database)?;
        let ast = parse_hybrid(sql, self.catalog, db)?;
        let mut planned = BTreeMap::new();
        for name in ast.virtual_specs() {
            let spec = self.catalog.spec(&name).expect("resolved spec exists");
            planned.insert(spec.name.clone(), plan_keys(&ast, db, spec, self.config.mode)?);
        }
        Ok((ast, planned))
    }

    pub fn query(&self, database: &str, sql: &str) -> Result<QueryOutcome> {
        let (ast, planned) = self.plan(database, sql)?;
        self.run_planned(database, &ast, planned)
    }

    fn run_planned(
        &self,
        database: &str,
        ast: &crate::sql_frontend::HybridQueryAst,
        planned: BTreeMap<String, Vec<KeyTuple>>,
    ) -> Result<QueryOutcome> {
        let db = self.database(database)?;
        let mut fill = FillOutcome::default();
        for (name, keys) in &planned {
            let spec = self.catalog.spec(name).expect("planned spec exists");
            fill.absorb(self.fill(spec, db, keys)?);
        }
        let rewritten_sql = rewrite_to_cache(ast);
        let result = execute_sql(&rewritten_sql, db)?;
        Ok(QueryOutcome { result, rewritten_sql, planned, fill })
    }

    /// Fills a spec's cache for every key of its base table.
    pub fn materialize_spec(&self, name: &str) -> Result<FillOutcome> {
        let spec = self
            .catalog
            .spec(name)
            .ok_or_else(|| Error::config("catalog", format!("unknown virtual table `{name}`")))?;
        let db = self.database(&spec.database)?;
        let keys = crate::generation::all_keys(db, spec)?;
        self.fill(spec, db, &keys)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRun {
    pub report: MetricsReport,
    /// Provider requests made during this run.
    pub invocations: usize,
    pub keys_requested: usize,
    pub rejections: Vec<Rejection>,
    /// Hybrid result per case, when execution succeeded.
    pub results: BTreeMap<String, ResultTable>,
}

/// Runs every case, then scores factuality over the caches and cost over the
/// logged requests for the keys the cases needed. Case failures are
/// recorded, never fatal.
pub fn run_suite(suite: &Suite, config: &EngineConfig, provider: &dyn Provider) -> Result<SuiteRun> {
    if suite.cases.is_empty() {
        return Err(Error::NoCases("a suite run"));
    }
    let metered = MeteredProvider::new(provider);
    let engine = HybridEngine::new(&suite.catalog, &metered, config.clone());

    let mut cases = Vec::with_capacity(suite.cases.len());
    let mut needed: BTreeMap<String, BTreeSet<KeyTuple>> = BTreeMap::new();
    let mut rejections = Vec::new();
    let mut results = BTreeMap::new();
    for case in &suite.cases {
        let outcome = (|| -> Result<(ResultTable, ResultTable)> {
            let db = suite
                .database(&case.database)
                .ok_or_else(|| Error::Data(format!("unknown database `{}`", case.database)))?;
            let (ast, planned) = engine.plan(&case.database, &case.hybrid_sql)?;
            for (spec, keys) in &planned {
                needed.entry(spec.clone()).or_default().extend(keys.iter().cloned());
            }
            let q = engine.run_planned(&case.database, &ast, planned)?;
            rejections.extend(q.fill.materialized.rejections.iter().cloned());
            let gold = match (&case.gold_sql, &case.gold_result) {
                (Some(sql), _) => execute_sql(sql, &db.full).map_err(|e| Error::Data(format!("gold query: {e}")))?,
                (None, Some(t)) => t.clone(),
                (None, None) => return Err(Error::Data("case has no gold".into())),
            };
            Ok((q.result, gold))
        })();
        let (passed, diagnostic) = match outcome {
            Ok((got, gold)) => {
                let cmp = compare_results(&got, &gold);
                results.insert(case.id.clone(), got);
                (cmp.equal, cmp.diagnostic)
            }
            Err(e) => {
                tracing::warn!(case = %case.id, error = %e, "case failed");
                (false, format!("error: {e}"))
            }
        };
        cases.push(CaseResult {
            id: case.id.clone(),
            database: case.database.clone(),
            passed,
            diagnostic,
        });
    }

    let ex = execution_accuracy(&cases)?;
    let specs: Vec<(&VirtualTableSpec, &DatabaseHandle)> = suite
        .catalog
        .specs()
        .map(|s| (s, suite.catalog.database(&s.database).expect("spec database registered")))
        .collect();
    let factuality = factuality_report(specs.iter().copied(), &suite.gold)?;

    let filter = engine.filter();
    let mut usage = Vec::new();
    for (name, keys) in &needed {
        let spec = suite.catalog.spec(name).expect("planned spec exists");
        let db = suite.catalog.database(&spec.database).expect("spec database registered");
        usage.extend(requests_for_keys(spec, keys, db, &filter)?.into_iter().map(|(_, u)| u));
    }
    let tokens = cost_report(&usage, cases.len())?;

    let report = MetricsReport {
        format_version: REPORT_FORMAT_VERSION,
        generated_at: now(),
        suite: suite.name.clone(),
        settings: RunSettings {
            provider_mode: config.provider.mode_name().to_string(),
            model_id: provider.model_id().to_string(),
            temperature: config.provider.temperature,
            max_output_tokens: config.provider.max_output_tokens,
            k: config.k,
            plan_mode: config.mode.to_string(),
            batch_size: config.provider.batch_size,
        },
        ex_overall: ex.overall,
        ex_per_database: ex.per_database,
        f1_overall: factuality.overall(),
        f1_per_database: factuality.per_database.clone(),
        f1_per_spec: factuality.per_spec.iter().map(|(k, v)| (k.clone(), v.f1())).collect(),
        tokens,
        per_case: cases,
    };
    Ok(SuiteRun {
        report,
        invocations: metered.invocations(),
        keys_requested: metered.keys_requested(),
        rejections,
        results,
    })
}
