//! Benchmark suites on disk.
//!
//! ```text
//! <suite>/
//!   suite.toml          manifest
//!   full.sql            optional script that builds full.db when absent
//!   full.db             complete database (gold SQL runs here)
//!   curation.toml       optional manifest that builds curated.db when absent
//!   curated.db          database the hybrid queries run against
//!   specs/<db>.toml     virtual-table specs
//!   gold/<db>.json      gold value store
//!   cases/*.toml        one case per file, run in file-name order
//!   fixtures/*.json     mock provider responses
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde::Deserialize;

use crate::bench::curate::{curate, write_curation, CurationManifest, CurationOutputs};
use crate::catalog::{parse_spec_file, validate_spec, Catalog, DatabaseHandle};
use crate::error::{Error, Result};
use crate::evaluator::GoldValueStore;
use crate::executor::{execute_sql, ResultTable};
use crate::sql_frontend::parse_hybrid;

pub const SUITE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteDoc {
    format_version: u32,
    name: String,
    #[serde(default)]
    default_k: usize,
    fixtures: Option<PathBuf>,
    #[serde(default, rename = "database")]
    databases: Vec<SuiteDatabaseDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteDatabaseDoc {
    id: String,
    full_db: PathBuf,
    full_sql: Option<PathBuf>,
    curated_db: PathBuf,
    curation: Option<PathBuf>,
    specs: PathBuf,
    gold: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteDatabase {
    pub id: String,
    pub full: DatabaseHandle,
    pub curated: DatabaseHandle,
}

/// One benchmark question.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkCase {
    pub id: String,
    pub database: String,
    pub question: String,
    pub hybrid_sql: String,
    pub gold_sql: Option<String>,
    pub gold_result: Option<ResultTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub name: String,
    pub root: PathBuf,
    pub default_k: usize,
    pub fixtures: Option<PathBuf>,
    pub databases: Vec<SuiteDatabase>,
    /// Curated databases and their specs.
    pub catalog: Catalog,
    pub gold: GoldValueStore,
    pub cases: Vec<BenchmarkCase>,
}

fn build_from_sql(script: &Path, target: &Path) -> Result<()> {
    let sql = std::fs::read_to_string(script).map_err(|e| Error::io(script, e))?;
    let tmp = target.with_extension("db-building");
    let _ = std::fs::remove_file(&tmp);
    Connection::open(&tmp)?.execute_batch(&sql)?;
    std::fs::rename(&tmp, target).map_err(|e| Error::io(target, e))
}

impl Suite {
    /// Loads a suite directory, building `full.db` and `curated.db` from
    /// their sources when the files are missing. Shipped specs and gold
    /// files are never overwritten.
    pub fn load(root: impl AsRef<Path>) -> Result<Suite> {
        let root = root.as_ref().to_path_buf();
        let manifest = root.join("suite.toml");
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let source = manifest.display().to_string();
        let doc: SuiteDoc = toml::from_str(&text).map_err(|e| Error::config(&source, e))?;
        if doc.format_version != SUITE_FORMAT_VERSION {
            return Err(Error::config(&source, format!("unsupported format_version {}", doc.format_version)));
        }

        let mut catalog = Catalog::new();
        let mut gold = GoldValueStore::default();
        let mut databases = Vec::new();
        for d in doc.databases {
            let full_path = root.join(&d.full_db);
            if !full_path.exists() {
                match &d.full_sql {
                    Some(script) => build_from_sql(&root.join(script), &full_path)?,
                    None => return Err(Error::MissingDatabase(full_path)),
                }
            }
            let full = DatabaseHandle::open(&d.id, &full_path)?;
            let outputs = CurationOutputs {
                curated_db: root.join(&d.curated_db),
                specs: root.join(&d.specs),
                gold: root.join(&d.gold),
            };
            if !outputs.curated_db.exists() {
                let Some(curation) = &d.curation else {
                    return Err(Error::MissingDatabase(outputs.curated_db));
                };
                let m = CurationManifest::load(root.join(curation))?;
                let tmp = outputs.curated_db.with_extension("db-building");
                let c = curate(&full, &m, &tmp)?;
                if !outputs.specs.exists() || !outputs.gold.exists() {
                    write_curation(&c, &outputs)?;
                }
                std::fs::rename(&tmp, &outputs.curated_db).map_err(|e| Error::io(&outputs.curated_db, e))?;
            }
            let curated = DatabaseHandle::open(&d.id, &outputs.curated_db)?;
            catalog.add_database(curated.clone())?;
            let spec_text = std::fs::read_to_string(&outputs.specs).map_err(|e| Error::io(&outputs.specs, e))?;
            for spec in parse_spec_file(&spec_text, &outputs.specs.display().to_string())? {
                if spec.database != d.id {
                    return Err(Error::config(
                        outputs.specs.display().to_string(),
                        format!("spec `{}` belongs to database `{}`", spec.name, spec.database),
                    ));
                }
                catalog.add_spec(spec)?;
            }
            gold.merge(GoldValueStore::load(&outputs.gold)?);
            databases.push(SuiteDatabase { id: d.id, full, curated });
        }

        let cases = load_cases(&root.join("cases"))?;
        Ok(Suite {
            name: doc.name,
            default_k: doc.default_k,
            fixtures: doc.fixtures.map(|f| root.join(f)),
            root,
            databases,
            catalog,
            gold,
            cases,
        })
    }

    pub fn database(&self, id: &str) -> Option<&SuiteDatabase> {
        self.databases.iter().find(|d| d.id == id)
    }

    /// Checks the suite invariants: specs valid on the curated data, gold
    /// covering exactly the curated keys, every hybrid query parsing with at
    /// least one virtual table, and every gold query executing on the full
    /// database.
    pub fn check(&self) -> Result<()> {
        for spec in self.catalog.specs() {
            let db = self.catalog.database(&spec.database).expect("spec database registered");
            validate_spec(spec, db)?;
            let gold = self
                .gold
                .spec(&spec.name)
                .ok_or_else(|| Error::Data(format!("gold store has no entry for `{}`", spec.name)))?;
            let keys: BTreeSet<_> = crate::generation::all_keys(db, spec)?.into_iter().collect();
            let gold_keys: BTreeSet<_> = gold.rows.iter().map(|r| r.key.clone()).collect();
            if keys != gold_keys {
                return Err(Error::Data(format!(
                    "gold keys of `{}` differ from the curated base table ({} vs {})",
                    spec.name,
                    gold_keys.len(),
                    keys.len()
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for case in &self.cases {
            if !ids.insert(&case.id) {
                return Err(Error::Data(format!("duplicate case id `{}`", case.id)));
            }
            let db = self
                .database(&case.database)
                .ok_or_else(|| Error::Data(format!("case `{}` names unknown database `{}`", case.id, case.database)))?;
            let ast = parse_hybrid(&case.hybrid_sql, &self.catalog, &db.curated)?;
            if ast.virtual_relations().next().is_none() {
                return Err(Error::Data(format!("case `{}` references no virtual table", case.id)));
            }
            match (&case.gold_sql, &case.gold_result) {
                (Some(sql), None) => {
                    execute_sql(sql, &db.full)?;
                }
                (None, Some(_)) => {}
                _ => {
                    return Err(Error::Data(format!("case `{}` needs exactly one of gold_sql and gold_result", case.id)));
                }
            }
        }
        Ok(())
    }

    /// Drops every cache table and the request log from the curated
    /// databases.
    pub fn clear_caches(&self) -> Result<()> {
        for d in &self.databases {
            let conn = d.curated.connect()?;
            let tables: Vec<String> = conn
                .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name LIKE 'llm\\_cache\\_%' ESCAPE '\\'")?
                .query_map([], |r| r.get(0))?
                .collect::<rusqlite::Result<_>>()?;
            for t in tables {
                conn.execute_batch(&format!("DROP TABLE {}", crate::catalog::quote_ident(&t)))?;
            }
        }
        Ok(())
    }
}

fn load_cases(dir: &Path) -> Result<Vec<BenchmarkCase>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::config(p.display().to_string(), e))
        })
        .collect()
}
