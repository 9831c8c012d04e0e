//! Databases and the virtual tables declared over them.
//!
//! A catalog is loaded from one or more TOML documents. Each document lists
//! the SQLite databases it refers to and the virtual tables whose rows come
//! from a language model. See `docs/formats.md` for the file layout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CATALOG_FORMAT_VERSION: u32 = 1;

/// Prefix shared by every table this crate writes next to the base tables.
pub const CACHE_PREFIX: &str = "llm_cache_";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    #[serde(default)]
    pub decl_type: String,
}

/// An SQLite database together with a snapshot of its base-table schema.
///
/// Cache tables are excluded from `schema`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatabaseHandle {
    pub id: String,
    pub location: PathBuf,
    pub schema: BTreeMap<String, Vec<ColumnDef>>,
}

impl DatabaseHandle {
    /// Opens an existing database file and reads its schema.
    pub fn open(id: impl Into<String>, location: impl Into<PathBuf>) -> Result<Self> {
        let location = location.into();
        if !location.is_file() {
            return Err(Error::MissingDatabase(location));
        }
        let mut handle = DatabaseHandle {
            id: id.into(),
            location,
            schema: BTreeMap::new(),
        };
        handle.reload_schema()?;
        Ok(handle)
    }

    pub fn connect(&self) -> Result<Connection> {
        let conn = Connection::open_with_flags(
            &self.location,
            OpenFlags::SQLITE_OPEN_READ_WRITE | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        Ok(conn)
    }

    pub fn reload_schema(&mut self) -> Result<()> {
        let conn = self.connect()?;
        self.schema = read_schema(&conn)?;
        Ok(())
    }

    /// Looks a table up case-insensitively, returning its canonical name.
    pub fn table(&self, name: &str) -> Option<(&str, &[ColumnDef])> {
        self.schema
            .iter()
            .find(|(t, _)| t.eq_ignore_ascii_case(name))
            .map(|(t, cols)| (t.as_str(), cols.as_slice()))
    }

    pub fn has_table(&self, name: &str) -> bool {
        self.table(name).is_some()
    }
}

pub(crate) fn read_schema(conn: &Connection) -> Result<BTreeMap<String, Vec<ColumnDef>>> {
    let mut stmt = conn.prepare(
        "SELECT name FROM sqlite_master WHERE type = 'table' \
         AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' \
         AND name NOT LIKE 'llm\\_cache\\_%' ESCAPE '\\' ORDER BY name",
    )?;
    let tables: Vec<String> = stmt
        .query_map([], |row| row.get(0))?
        .collect::<rusqlite::Result<_>>()?;
    let mut schema = BTreeMap::new();
    for table in tables {
        schema.insert(table.clone(), table_columns(conn, &table)?);
    }
    Ok(schema)
}

pub(crate) fn table_columns(conn: &Connection, table: &str) -> Result<Vec<ColumnDef>> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", quote_ident(table)))?;
    let cols = stmt
        .query_map([], |row| {
            Ok(ColumnDef {
                name: row.get(1)?,
                decl_type: row.get(2)?,
            })
        })?
        .collect::<rusqlite::Result<_>>()?;
    Ok(cols)
}

/// Double-quotes an SQL identifier.
pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

pub(crate) fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cardinality {
    One,
    Many,
}

impl fmt::Display for Cardinality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cardinality::One => "one",
            Cardinality::Many => "many",
        })
    }
}

/// The values a generated attribute may take.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueDomain {
    /// Free-form text.
    Free,
    /// Selection from a fixed list.
    Closed(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub domain: ValueDomain,
    pub cardinality: Cardinality,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyAttr {
    pub name: String,
    #[serde(rename = "type", default = "default_semantic_type")]
    pub semantic_type: String,
}

fn default_semantic_type() -> String {
    "text".to_string()
}

/// One demonstration row: key values followed by the gold generated values.
/// Many-valued attributes are given in condensed form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub keys: Vec<String>,
    pub values: Vec<String>,
}

/// Declaration of a table whose rows are produced by the language model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualTableSpec {
    pub name: String,
    pub database: String,
    pub base_table: String,
    pub task_instruction: String,
    pub key_attrs: Vec<KeyAttr>,
    pub gen_attrs: Vec<AttributeSpec>,
    #[serde(default, rename = "fewshot")]
    pub fewshot_pool: Vec<FewShotExample>,
}

impl VirtualTableSpec {
    /// Name of the physical table generated rows are materialized into.
    pub fn cache_table(&self) -> String {
        cache_table_name(&self.name)
    }

    pub fn key_names(&self) -> impl Iterator<Item = &str> {
        self.key_attrs.iter().map(|k| k.name.as_str())
    }

    pub fn gen_names(&self) -> impl Iterator<Item = &str> {
        self.gen_attrs.iter().map(|a| a.name.as_str())
    }

    /// Column names of the virtual table: keys then generated attributes.
    pub fn columns(&self) -> Vec<String> {
        self.key_names()
            .chain(self.gen_names())
            .map(str::to_string)
            .collect()
    }

    pub fn arity(&self) -> usize {
        self.key_attrs.len() + self.gen_attrs.len()
    }

    /// Checks the structural invariants that do not need the database.
    pub fn check_structure(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidSpec {
            spec: self.name.clone(),
            message,
        };
        if !is_identifier(&self.name) {
            return Err(bad("name must match [A-Za-z][A-Za-z0-9_]*".into()));
        }
        if self.key_attrs.is_empty() {
            return Err(bad("key_attrs is empty".into()));
        }
        if self.gen_attrs.is_empty() {
            return Err(bad("gen_attrs is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in self.key_names().chain(self.gen_names()) {
            if !seen.insert(name.to_ascii_lowercase()) {
                return Err(bad(format!("attribute `{name}` declared twice")));
            }
        }
        for attr in &self.gen_attrs {
            if let ValueDomain::Closed(values) = &attr.domain {
                if values.is_empty() {
                    return Err(bad(format!("closed domain of `{}` is empty", attr.name)));
                }
                let mut distinct = std::collections::BTreeSet::new();
                for v in values {
                    if v.trim().is_empty() {
                        return Err(bad(format!("closed domain of `{}` has an empty value", attr.name)));
                    }
                    if !distinct.insert(v.as_str()) {
                        return Err(bad(format!(
                            "closed domain of `{}` lists `{v}` twice",
                            attr.name
                        )));
                    }
                }
            }
        }
        for (i, ex) in self.fewshot_pool.iter().enumerate() {
            if ex.keys.len() != self.key_attrs.len() || ex.values.len() != self.gen_attrs.len() {
                return Err(bad(format!(
                    "few-shot example {i} has arity {}+{}, expected {}+{}",
                    ex.keys.len(),
                    ex.values.len(),
                    self.key_attrs.len(),
                    self.gen_attrs.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn cache_table_name(spec: &str) -> String {
    format!("{CACHE_PREFIX}{spec}")
}

/// All databases and virtual tables known to an engine. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    databases: BTreeMap<String, DatabaseHandle>,
    specs: BTreeMap<String, VirtualTableSpec>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct CatalogDoc {
    pub format_version: u32,
    #[serde(default, rename = "database", skip_serializing_if = "Vec::is_empty")]
    pub databases: Vec<DatabaseDoc>,
    #[serde(default, rename = "virtual_table")]
    pub virtual_tables: Vec<VirtualTableSpec>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct DatabaseDoc {
    pub id: String,
    pub path: PathBuf,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a catalog document. Relative database paths resolve against
    /// `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path, source: &str) -> Result<Self> {
        let doc: CatalogDoc = toml::from_str(text).map_err(|e| Error::config(source, e))?;
        if doc.format_version != CATALOG_FORMAT_VERSION {
            return Err(Error::config(
                source,
                format!("unsupported format_version {}", doc.format_version),
            ));
        }
        let mut catalog = Catalog::new();
        for db in doc.databases {
            let path = base_dir.join(&db.path);
            catalog.add_database(DatabaseHandle::open(db.id, path)?)?;
        }
        for spec in doc.virtual_tables {
            catalog.add_spec(spec)?;
        }
        Ok(catalog)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base, &path.display().to_string())
    }

    /// Combines two catalogs; names must stay unique.
    pub fn merge(&mut self, other: Catalog) -> Result<()> {
        for (_, db) in other.databases {
            if let Some(existing) = self.databases.get(&db.id) {
                if existing.location == db.location {
                    continue;
                }
            }
            self.add_database(db)?;
        }
        for (_, spec) in other.specs {
            self.add_spec(spec)?;
        }
        Ok(())
    }

    pub fn add_database(&mut self, db: DatabaseHandle) -> Result<()> {
        if self.databases.contains_key(&db.id) {
            return Err(Error::DuplicateName {
                kind: "database",
                name: db.id,
            });
        }
        self.databases.insert(db.id.clone(), db);
        Ok(())
    }

    pub fn add_spec(&mut self, spec: VirtualTableSpec) -> Result<()> {
        spec.check_structure()?;
        if self
            .specs
            .keys()
            .any(|name| name.eq_ignore_ascii_case(&spec.name))
        {
            return Err(Error::DuplicateName {
                kind: "virtual table",
                name: spec.name,
            });
        }
        let db = self.databases.get(&spec.database).ok_or_else(|| Error::InvalidSpec {
            spec: spec.name.clone(),
            message: format!("unknown database `{}`", spec.database),
        })?;
        if db.has_table(&spec.name) {
            return Err(Error::InvalidSpec {
                spec: spec.name.clone(),
                message: "name collides with a base table".into(),
            });
        }
        self.specs.insert(spec.name.clone(), spec);
        Ok(())
    }

    pub fn database(&self, id: &str) -> Option<&DatabaseHandle> {
        self.databases.get(id)
    }

    pub fn databases(&self) -> impl Iterator<Item = &DatabaseHandle> {
        self.databases.values()
    }

    pub fn spec(&self, name: &str) -> Option<&VirtualTableSpec> {
        self.specs
            .values()
            .find(|s| s.name.eq_ignore_ascii_case(name))
    }

    pub fn specs(&self) -> impl Iterator<Item = &VirtualTableSpec> {
        self.specs.values()
    }

    pub fn specs_for<'a>(&'a self, database: &'a str) -> impl Iterator<Item = &'a VirtualTableSpec> {
        self.specs.values().filter(move |s| s.database == database)
    }

    /// Resolves a cache table name back to its spec.
    pub fn spec_for_cache(&self, table: &str) -> Option<&VirtualTableSpec> {
        let lower = table.to_ascii_lowercase();
        let name = lower.strip_prefix(CACHE_PREFIX)?;
        self.spec(name)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.databases.len(), self.specs.len())
    }
}

/// Reads a catalog document that declares only virtual tables; their
/// `database` fields refer to databases registered elsewhere.
pub fn parse_spec_file(text: &str, source: &str) -> Result<Vec<VirtualTableSpec>> {
    let doc: CatalogDoc = toml::from_str(text).map_err(|e| Error::config(source, e))?;
    if doc.format_version != CATALOG_FORMAT_VERSION {
        return Err(Error::config(
            source,
            format!("unsupported format_version {}", doc.format_version),
        ));
    }
    if !doc.databases.is_empty() {
        return Err(Error::config(source, "spec files must not declare databases"));
    }
    for spec in &doc.virtual_tables {
        spec.check_structure()?;
    }
    Ok(doc.virtual_tables)
}

/// Renders specs as a catalog document accepted by [`parse_spec_file`].
pub fn render_spec_file(specs: &[VirtualTableSpec]) -> String {
    let doc = CatalogDoc {
        format_version: CATALOG_FORMAT_VERSION,
        databases: Vec::new(),
        virtual_tables: specs.to_vec(),
    };
    toml::to_string(&doc).expect("catalog doc serializes")
}

/// Outcome of checking a spec against its base table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub spec: String,
    pub rows: usize,
    pub distinct_keys: usize,
    pub warnings: Vec<String>,
}

/// Checks that the key columns exist in the base table and identify its rows.
pub fn validate_spec(spec: &VirtualTableSpec, db: &DatabaseHandle) -> Result<ValidationReport> {
    spec.check_structure()?;
    let (table, columns) = db
        .table(&spec.base_table)
        .ok_or_else(|| Error::MissingTable(spec.base_table.clone()))?;
    for key in &spec.key_attrs {
        if !columns.iter().any(|c| c.name.eq_ignore_ascii_case(&key.name)) {
            return Err(Error::MissingColumn {
                table: table.to_string(),
                column: key.name.clone(),
            });
        }
    }
    let conn = db.connect()?;
    let from = quote_ident(table);
    let keys: Vec<String> = spec.key_names().map(quote_ident).collect();
    let key_list = keys.join(", ");

    let rows: i64 = conn.query_row(&format!("SELECT COUNT(*) FROM {from}"), [], |r| r.get(0))?;
    let mut warnings = Vec::new();
    if rows == 0 {
        warnings.push(format!("base table `{table}` is empty"));
    }

    let null_cond = keys
        .iter()
        .map(|k| format!("{k} IS NULL OR TRIM(CAST({k} AS TEXT)) = ''"))
        .collect::<Vec<_>>()
        .join(" OR ");
    let null_rows: i64 = conn.query_row(
        &format!("SELECT COUNT(*) FROM {from} WHERE {null_cond}"),
        [],
        |r| r.get(0),
    )?;
    if null_rows > 0 {
        return Err(Error::NullKey {
            spec: spec.name.clone(),
            columns: spec.key_names().collect::<Vec<_>>().join(", "),
            rows: null_rows as usize,
        });
    }

    let distinct: i64 = conn.query_row(
        &format!("SELECT COUNT(*) FROM (SELECT DISTINCT {key_list} FROM {from})"),
        [],
        |r| r.get(0),
    )?;
    if distinct != rows {
        let mut stmt = conn.prepare(&format!(
            "SELECT {key_list} FROM {from} GROUP BY {key_list} HAVING COUNT(*) > 1 ORDER BY {key_list}"
        ))?;
        let n = keys.len();
        let dups: Vec<String> = stmt
            .query_map([], |row| {
                let parts: Vec<String> = (0..n)
                    .map(|i| value_to_text(row.get_ref(i)?))
                    .collect::<rusqlite::Result<_>>()?;
                Ok(parts.join(", "))
            })?
            .collect::<rusqlite::Result<_>>()?;
        return Err(Error::KeyNotUnique {
            spec: spec.name.clone(),
            columns: spec.key_names().collect::<Vec<_>>().join(", "),
            duplicates: dups.len(),
            example: dups.first().cloned().unwrap_or_default(),
        });
    }

    Ok(ValidationReport {
        spec: spec.name.clone(),
        rows: rows as usize,
        distinct_keys: distinct as usize,
        warnings,
    })
}

/// Renders an SQLite value as the text used for keys and generated values.
pub(crate) fn value_to_text(value: rusqlite::types::ValueRef<'_>) -> rusqlite::Result<String> {
    use rusqlite::types::ValueRef;
    Ok(match value {
        ValueRef::Null => String::new(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => f.to_string(),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => String::from_utf8_lossy(b).into_owned(),
    })
}
