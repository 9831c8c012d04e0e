//! Derives a curated database, gold values and virtual-table specs from a
//! complete database.
//!
//! A manifest names the tables and columns to remove and, for each virtual
//! table, the key columns and the SQL over the full database that yields the
//! removed values:
//!
//! ```toml
//! format_version = 1
//! database_id = "superhero"
//! drop_tables = ["superpower"]
//!
//! [[drop_columns]]
//! table = "superhero"
//! columns = ["publisher_id"]
//!
//! [[virtual_table]]
//! name = "hero_publisher"
//! base_table = "superhero"
//! task_instruction = "Identify the publisher of each superhero."
//! key_attrs = [{ name = "superhero_name", type = "superhero name" }]
//! fewshot_keys = [["3-D Man"]]
//!
//! [[virtual_table.gen_attrs]]
//! name = "publisher_name"
//! cardinality = "one"
//! source = "SELECT s.superhero_name, p.publisher_name FROM superhero s JOIN publisher p ON p.id = s.publisher_id"
//! domain = { from_table = { table = "publisher", column = "publisher_name" } }
//! ```
//!
//! `source` returns the key columns followed by one value column; many-valued
//! attributes return one row per value.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde::Deserialize;

use crate::catalog::{
    quote_ident, render_spec_file, table_columns, validate_spec, value_to_text, AttributeSpec,
    Cardinality, DatabaseHandle, FewShotExample, KeyAttr, ValueDomain, VirtualTableSpec,
};
use crate::error::{Error, Result};
use crate::evaluator::{GoldRow, GoldSpec, GoldValueStore};
use crate::generation::KeyTuple;
use crate::materializer::condense_many;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationManifest {
    pub format_version: u32,
    pub database_id: String,
    #[serde(default)]
    pub drop_tables: Vec<String>,
    #[serde(default)]
    pub drop_columns: Vec<ColumnDrop>,
    #[serde(default)]
    pub virtual_table: Vec<ManifestTable>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnDrop {
    pub table: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTable {
    pub name: String,
    pub base_table: String,
    pub task_instruction: String,
    pub key_attrs: Vec<KeyAttr>,
    pub gen_attrs: Vec<ManifestAttr>,
    /// Keys whose gold values become the few-shot pool, in order.
    #[serde(default)]
    pub fewshot_keys: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestAttr {
    pub name: String,
    pub cardinality: Cardinality,
    pub source: String,
    pub domain: ManifestDomain,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestDomain {
    Free,
    Closed(Vec<String>),
    /// All distinct non-empty values of a column in the full database.
    FromTable { table: String, column: String },
}

impl CurationManifest {
    pub fn from_toml_str(text: &str, source: &str) -> Result<Self> {
        let m: CurationManifest = toml::from_str(text).map_err(|e| Error::config(source, e))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::config(source, format!("unsupported format_version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// A manifest that changes nothing.
    pub fn empty(database_id: impl Into<String>) -> Self {
        CurationManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            database_id: database_id.into(),
            drop_tables: Vec::new(),
            drop_columns: Vec::new(),
            virtual_table: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curation {
    pub curated_db: DatabaseHandle,
    pub gold: GoldValueStore,
    pub specs: Vec<VirtualTableSpec>,
}

/// Paths written by [`write_curation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurationOutputs {
    pub curated_db: PathBuf,
    pub specs: PathBuf,
    pub gold: PathBuf,
}

impl CurationOutputs {
    pub fn in_dir(dir: &Path, database_id: &str) -> Self {
        CurationOutputs {
            curated_db: dir.join("curated.db"),
            specs: dir.join("specs").join(format!("{database_id}.toml")),
            gold: dir.join("gold").join(format!("{database_id}.json")),
        }
    }
}

fn find_column<'a>(cols: &'a [crate::catalog::ColumnDef], name: &str) -> Option<&'a str> {
    cols.iter().find(|c| c.name.eq_ignore_ascii_case(name)).map(|c| c.name.as_str())
}

fn check_manifest(full: &DatabaseHandle, m: &CurationManifest) -> Result<()> {
    let dropped_tables: BTreeSet<String> = m.drop_tables.iter().map(|t| t.to_ascii_lowercase()).collect();
    for t in &m.drop_tables {
        if !full.has_table(t) {
            return Err(Error::MissingTable(t.clone()));
        }
    }
    let mut dropped_cols: BTreeSet<(String, String)> = BTreeSet::new();
    for d in &m.drop_columns {
        let (_, cols) = full.table(&d.table).ok_or_else(|| Error::MissingTable(d.table.clone()))?;
        if dropped_tables.contains(&d.table.to_ascii_lowercase()) {
            return Err(Error::config("curation manifest", format!("table `{}` is both dropped and column-dropped", d.table)));
        }
        for c in &d.columns {
            if find_column(cols, c).is_none() {
                return Err(Error::MissingColumn { table: d.table.clone(), column: c.clone() });
            }
            dropped_cols.insert((d.table.to_ascii_lowercase(), c.to_ascii_lowercase()));
        }
        if d.columns.len() >= cols.len() {
            return Err(Error::config("curation manifest", format!("cannot drop every column of `{}`", d.table)));
        }
    }
    for vt in &m.virtual_table {
        let base = vt.base_table.to_ascii_lowercase();
        if dropped_tables.contains(&base) {
            return Err(Error::InvalidSpec { spec: vt.name.clone(), message: "base table is dropped".into() });
        }
        for k in &vt.key_attrs {
            if dropped_cols.contains(&(base.clone(), k.name.to_ascii_lowercase())) {
                return Err(Error::InvalidSpec { spec: vt.name.clone(), message: format!("key column `{}` is dropped", k.name) });
            }
        }
    }
    Ok(())
}

fn manifest_spec(vt: &ManifestTable, database: &str, domains: Vec<ValueDomain>) -> VirtualTableSpec {
    VirtualTableSpec {
        name: vt.name.clone(),
        database: database.to_string(),
        base_table: vt.base_table.clone(),
        task_instruction: vt.task_instruction.clone(),
        key_attrs: vt.key_attrs.clone(),
        gen_attrs: vt
            .gen_attrs
            .iter()
            .zip(domains)
            .map(|(a, domain)| AttributeSpec { name: a.name.clone(), domain, cardinality: a.cardinality })
            .collect(),
        fewshot_pool: Vec::new(),
    }
}

fn resolve_domain(conn: &Connection, full: &DatabaseHandle, d: &ManifestDomain) -> Result<ValueDomain> {
    Ok(match d {
        ManifestDomain::Free => ValueDomain::Free,
        ManifestDomain::Closed(values) => ValueDomain::Closed(values.clone()),
        ManifestDomain::FromTable { table, column } => {
            let (t, cols) = full.table(table).ok_or_else(|| Error::MissingTable(table.clone()))?;
            let c = find_column(cols, column).ok_or_else(|| Error::MissingColumn { table: table.clone(), column: column.clone() })?;
            let mut stmt = conn.prepare(&format!(
                "SELECT DISTINCT {c} FROM {t} WHERE {c} IS NOT NULL AND TRIM({c}) <> '' ORDER BY {c}",
                c = quote_ident(c),
                t = quote_ident(t)
            ))?;
            let values = stmt
                .query_map([], |r| value_to_text(r.get_ref(0)?))?
                .collect::<rusqlite::Result<Vec<_>>>()?;
            ValueDomain::Closed(values.into_iter().map(|v| v.trim().to_string()).collect::<BTreeSet<_>>().into_iter().collect())
        }
    })
}

/// Key tuple to value set, from an attribute's source query.
fn source_values(conn: &Connection, spec: &str, attr: &ManifestAttr, nkeys: usize) -> Result<BTreeMap<KeyTuple, BTreeSet<String>>> {
    let mut stmt = conn
        .prepare(&attr.source)
        .map_err(|e| Error::InvalidSpec { spec: spec.into(), message: format!("source of `{}`: {e}", attr.name) })?;
    if stmt.column_count() != nkeys + 1 {
        return Err(Error::InvalidSpec {
            spec: spec.into(),
            message: format!("source of `{}` must return {} columns, returns {}", attr.name, nkeys + 1, stmt.column_count()),
        });
    }
    let mut out: BTreeMap<KeyTuple, BTreeSet<String>> = BTreeMap::new();
    let mut rows = stmt.query([])?;
    while let Some(row) = rows.next()? {
        let mut key = Vec::with_capacity(nkeys);
        for i in 0..nkeys {
            key.push(value_to_text(row.get_ref(i)?)?);
        }
        let value = row.get_ref(nkeys)?;
        let entry = out.entry(KeyTuple(key)).or_default();
        if value != rusqlite::types::ValueRef::Null {
            let v = value_to_text(value)?.trim().to_string();
            if !v.is_empty() {
                entry.insert(v);
            }
        }
    }
    Ok(out)
}

/// Validates the manifest, then writes the curated copy of `full` to
/// `curated_path` and derives gold values and specs.
pub fn curate(full: &DatabaseHandle, manifest: &CurationManifest, curated_path: &Path) -> Result<Curation> {
    check_manifest(full, manifest)?;
    let conn = full.connect()?;
    let db_id = manifest.database_id.clone();

    // Build specs and gold against the full database before writing anything.
    let mut specs = Vec::new();
    let mut gold = GoldValueStore::default();
    let mut sources = Vec::new();
    for vt in &manifest.virtual_table {
        let domains = vt
            .gen_attrs
            .iter()
            .map(|a| resolve_domain(&conn, full, &a.domain))
            .collect::<Result<Vec<_>>>()?;
        let spec = manifest_spec(vt, &db_id, domains);
        spec.check_structure()?;
        validate_spec(&spec, full)?;
        let per_attr = vt
            .gen_attrs
            .iter()
            .map(|a| source_values(&conn, &vt.name, a, vt.key_attrs.len()))
            .collect::<Result<Vec<_>>>()?;
        for (attr, values) in vt.gen_attrs.iter().zip(&per_attr) {
            if attr.cardinality == Cardinality::One {
                if let Some((k, _)) = values.iter().find(|(_, v)| v.len() > 1) {
                    return Err(Error::Data(format!(
                        "one-valued attribute `{}` of `{}` has several values for ({k})",
                        attr.name, vt.name
                    )));
                }
            }
        }
        sources.push(per_attr);
        specs.push(spec);
    }

    if let Some(parent) = curated_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if curated_path.exists() {
        std::fs::remove_file(curated_path).map_err(|e| Error::io(curated_path, e))?;
    }
    conn.execute("VACUUM INTO ?1", [curated_path.to_string_lossy()])?;
    drop(conn);
    {
        let out = Connection::open(curated_path)?;
        for t in &manifest.drop_tables {
            out.execute_batch(&format!("DROP TABLE {}", quote_ident(t)))?;
        }
        for d in &manifest.drop_columns {
            drop_columns(&out, &d.table, &d.columns)?;
        }
        out.execute_batch("VACUUM")?;
    }
    let curated_db = DatabaseHandle::open(db_id.clone(), curated_path)?;

    for ((vt, spec), per_attr) in manifest.virtual_table.iter().zip(specs.iter_mut()).zip(sources) {
        let keys = crate::generation::all_keys(&curated_db, spec)?;
        let rows: Vec<GoldRow> = keys
            .into_iter()
            .map(|key| {
                let values = per_attr
                    .iter()
                    .map(|m| m.get(&key).map(|s| s.iter().cloned().collect()).unwrap_or_default())
                    .collect();
                GoldRow { key, values }
            })
            .collect();
        let gold_spec = GoldSpec {
            database: db_id.clone(),
            attributes: spec.gen_names().map(String::from).collect(),
            rows,
        };
        let lookup = gold_spec.lookup();
        for keys in &vt.fewshot_keys {
            let key = KeyTuple(keys.clone());
            let values = lookup.get(&key).ok_or_else(|| Error::InvalidSpec {
                spec: spec.name.clone(),
                message: format!("few-shot key ({key}) is not a key of `{}`", spec.base_table),
            })?;
            let values = values
                .iter()
                .map(|set| {
                    if set.is_empty() {
                        return Err(Error::InvalidSpec {
                            spec: spec.name.clone(),
                            message: format!("few-shot key ({key}) has no gold value"),
                        });
                    }
                    condense_many(set)
                })
                .collect::<Result<Vec<_>>>()?;
            spec.fewshot_pool.push(FewShotExample { keys: keys.clone(), values });
        }
        spec.check_structure()?;
        gold.specs.insert(spec.name.clone(), gold_spec);
    }
    Ok(Curation { curated_db, gold, specs })
}

fn drop_columns(conn: &Connection, table: &str, columns: &[String]) -> Result<()> {
    let direct = columns
        .iter()
        .try_for_each(|c| conn.execute_batch(&format!("ALTER TABLE {} DROP COLUMN {}", quote_ident(table), quote_ident(c))));
    if direct.is_ok() {
        return Ok(());
    }
    // DROP COLUMN refuses indexed or constrained columns; rebuild instead.
    tracing::debug!(table, "ALTER TABLE DROP COLUMN failed, rebuilding table");
    let drop: BTreeSet<String> = columns.iter().map(|c| c.to_ascii_lowercase()).collect();
    let keep: Vec<String> = table_columns(conn, table)?
        .into_iter()
        .filter(|c| !drop.contains(&c.name.to_ascii_lowercase()))
        .map(|c| format!("{} {}", quote_ident(&c.name), c.decl_type).trim_end().to_string())
        .collect();
    let names: Vec<String> = table_columns(conn, table)?
        .into_iter()
        .filter(|c| !drop.contains(&c.name.to_ascii_lowercase()))
        .map(|c| quote_ident(&c.name))
        .collect();
    let tmp = quote_ident(&format!("{table}__curating"));
    let t = quote_ident(table);
    conn.execute_batch(&format!(
        "BEGIN; CREATE TABLE {tmp} ({}); INSERT INTO {tmp} SELECT {} FROM {t}; DROP TABLE {t}; ALTER TABLE {tmp} RENAME TO {t}; COMMIT;",
        keep.join(", "),
        names.join(", ")
    ))?;
    Ok(())
}

/// Writes the curated database's specs and gold store next to it.
pub fn write_curation(curation: &Curation, outputs: &CurationOutputs) -> Result<()> {
    for path in [&outputs.specs, &outputs.gold] {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(&outputs.specs, render_spec_file(&curation.specs)).map_err(|e| Error::io(&outputs.specs, e))?;
    curation.gold.save(&outputs.gold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::execute_sql;

    const FULL: &str = "
        CREATE TABLE publisher (id INTEGER PRIMARY KEY, publisher_name TEXT);
        INSERT INTO publisher VALUES (1, 'Marvel Comics'), (2, 'DC Comics');
        CREATE TABLE superhero (id INTEGER PRIMARY KEY, superhero_name TEXT, full_name TEXT, publisher_id INTEGER REFERENCES publisher(id), height INTEGER);
        CREATE INDEX hero_pub ON superhero(publisher_id);
        INSERT INTO superhero VALUES (1, 'Spider-Man', 'Peter Parker', 1, 178), (2, 'Batman', 'Bruce Wayne', 2, 188), (3, 'Hulk', 'Bruce Banner', 1, 244);
        CREATE TABLE superpower (id INTEGER PRIMARY KEY, power_name TEXT);
        INSERT INTO superpower VALUES (1, 'Agility'), (2, 'Super Strength');
        CREATE TABLE hero_power (hero_id INTEGER, power_id INTEGER);
        INSERT INTO hero_power VALUES (1, 1), (1, 2), (3, 2);
    ";

    fn full() -> (tempfile::TempDir, DatabaseHandle) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.db");
        Connection::open(&path).unwrap().execute_batch(FULL).unwrap();
        (dir, DatabaseHandle::open("superhero", &path).unwrap())
    }

    const MANIFEST: &str = r#"
format_version = 1
database_id = "superhero"
drop_tables = ["hero_power", "superpower"]

[[drop_columns]]
table = "superhero"
columns = ["publisher_id"]

[[virtual_table]]
name = "hero_publisher"
base_table = "superhero"
task_instruction = "Identify the publisher of each superhero."
key_attrs = [{ name = "superhero_name" }, { name = "full_name" }]
fewshot_keys = [["Spider-Man", "Peter Parker"]]

[[virtual_table.gen_attrs]]
name = "publisher_name"
cardinality = "one"
source = "SELECT s.superhero_name, s.full_name, p.publisher_name FROM superhero s JOIN publisher p ON p.id = s.publisher_id"
domain = { from_table = { table = "publisher", column = "publisher_name" } }

[[virtual_table]]
name = "hero_powers"
base_table = "superhero"
task_instruction = "List the powers of each superhero."
key_attrs = [{ name = "superhero_name" }, { name = "full_name" }]

[[virtual_table.gen_attrs]]
name = "powers"
cardinality = "many"
source = "SELECT s.superhero_name, s.full_name, sp.power_name FROM superhero s JOIN hero_power hp ON hp.hero_id = s.id JOIN superpower sp ON sp.id = hp.power_id"
domain = "free"
"#;

    #[test]
    fn curation_with_drops() {
        let (dir, full) = full();
        let m = CurationManifest::from_toml_str(MANIFEST, "mem").unwrap();
        let c = curate(&full, &m, &dir.path().join("out/curated.db")).unwrap();
        let (_, cols) = c.curated_db.table("superhero").unwrap();
        assert!(cols.iter().all(|c| c.name != "publisher_id"));
        assert!(!c.curated_db.has_table("hero_power"));
        assert!(c.curated_db.has_table("publisher"));

        let publisher = &c.specs[0];
        assert_eq!(publisher.gen_attrs[0].domain, ValueDomain::Closed(vec!["DC Comics".into(), "Marvel Comics".into()]));
        assert_eq!(publisher.fewshot_pool[0].values, ["Marvel Comics"]);
        let gold = c.gold.spec("hero_publisher").unwrap().lookup();
        assert_eq!(gold.len(), 3);
        assert_eq!(gold[&KeyTuple::new(["Batman", "Bruce Wayne"])], [vec!["DC Comics".to_string()]]);
        let powers = c.gold.spec("hero_powers").unwrap().lookup();
        assert_eq!(powers[&KeyTuple::new(["Spider-Man", "Peter Parker"])], [vec!["Agility".to_string(), "Super Strength".to_string()]]);
        assert!(powers[&KeyTuple::new(["Batman", "Bruce Wayne"])][0].is_empty());

        let q = "SELECT superhero_name, height FROM superhero ORDER BY id";
        assert_eq!(execute_sql(q, &full).unwrap(), execute_sql(q, &c.curated_db).unwrap());
    }

    #[test]
    fn empty_manifest_is_identity() {
        let (dir, full) = full();
        let c = curate(&full, &CurationManifest::empty("superhero"), &dir.path().join("c.db")).unwrap();
        assert_eq!(c.curated_db.schema, full.schema);
        assert!(c.gold.is_empty());
        assert!(c.specs.is_empty());
        for t in full.schema.keys() {
            let q = format!("SELECT * FROM {t}");
            assert_eq!(execute_sql(&q, &full).unwrap(), execute_sql(&q, &c.curated_db).unwrap());
        }
    }

    #[test]
    fn bad_target_fails_before_writing() {
        let (dir, full) = full();
        let text = MANIFEST.replace("columns = [\"publisher_id\"]", "columns = [\"publisher_code\"]");
        let m = CurationManifest::from_toml_str(&text, "mem").unwrap();
        let out = dir.path().join("never.db");
        assert!(matches!(curate(&full, &m, &out), Err(Error::MissingColumn { .. })));
        assert!(!out.exists());
    }

    #[test]
    fn non_unique_key_fails() {
        let (dir, full) = full();
        let text = MANIFEST.replace(
            "key_attrs = [{ name = \"superhero_name\" }, { name = \"full_name\" }]\nfewshot_keys",
            "key_attrs = [{ name = \"publisher_id\" }]\nfewshot_keys",
        );
        let m = CurationManifest::from_toml_str(&text, "mem").unwrap();
        assert!(curate(&full, &m, &dir.path().join("c.db")).is_err());
    }

    #[test]
    fn outputs_round_trip() {
        let (dir, full) = full();
        let m = CurationManifest::from_toml_str(MANIFEST, "mem").unwrap();
        let outputs = CurationOutputs::in_dir(dir.path(), "superhero");
        let c = curate(&full, &m, &outputs.curated_db).unwrap();
        write_curation(&c, &outputs).unwrap();
        let specs = crate::catalog::parse_spec_file(&std::fs::read_to_string(&outputs.specs).unwrap(), "x").unwrap();
        assert_eq!(specs, c.specs);
        assert_eq!(GoldValueStore::load(&outputs.gold).unwrap(), c.gold);
    }
}
