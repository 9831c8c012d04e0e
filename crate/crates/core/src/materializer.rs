//! Turns provider text into validated rows and stores them in cache tables.
//!
//! A cache table `llm_cache_<spec>` holds the key columns (with the base
//! table's declared types), one TEXT column per generated attribute and the
//! provenance columns `model_id`, `prompt_hash`, `created_at`, `k`. A unique
//! index over the key columns makes writes upserts.
//!
//! Each provider request is also logged to `llm_cache__requests` so cost
//! reports can be rebuilt without calling the provider again.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::catalog::{quote_ident, value_to_text, Cardinality, DatabaseHandle, VirtualTableSpec};
use crate::error::{Error, Result};
use crate::generation::{BatchOutcome, KeyTuple, ProviderResponse};

/// Table recording every provider request.
pub const REQUEST_LOG_TABLE: &str = "llm_cache__requests";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    /// Too few or too many fields.
    Arity,
    /// A generated field still reads `?`.
    ResidualPlaceholder,
    /// A generated field is empty.
    Empty,
    /// The key columns match no requested key.
    UnexpectedKey,
}

impl std::fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InvalidReason::Arity => "arity",
            InvalidReason::ResidualPlaceholder => "residual_placeholder",
            InvalidReason::Empty => "empty",
            InvalidReason::UnexpectedKey => "unexpected_key",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedRow {
    pub key_values: Vec<String>,
    pub gen_values: Vec<String>,
    pub valid: bool,
    pub invalid_reason: Option<InvalidReason>,
    /// The response line this row came from.
    pub raw: String,
}

impl ExtractedRow {
    fn invalid(raw: &str, reason: InvalidReason, fields: Vec<String>, keys: usize) -> Self {
        let split = keys.min(fields.len());
        let mut key_values = fields;
        let gen_values = key_values.split_off(split);
        ExtractedRow {
            key_values,
            gen_values,
            valid: false,
            invalid_reason: Some(reason),
            raw: raw.to_string(),
        }
    }

    pub fn key(&self) -> KeyTuple {
        KeyTuple(self.key_values.clone())
    }
}

/// Joins values with `", "` after trimming each one.
pub fn condense_many<S: AsRef<str>>(values: &[S]) -> Result<String> {
    let mut out = Vec::with_capacity(values.len());
    for v in values {
        let v = v.as_ref();
        if v.contains(',') {
            return Err(Error::EmbeddedComma(v.to_string()));
        }
        out.push(v.trim());
    }
    Ok(out.join(", "))
}

/// Splits on commas, trims, and drops empty pieces.
pub fn split_many(text: &str) -> Vec<String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_line(line: &str) -> Option<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .buffer_capacity(line.len() + 1)
        .from_reader(line.as_bytes());
    let record = reader.records().next()?.ok()?;
    Some(record.iter().map(String::from).collect())
}

/// Parses each non-blank response line into a row and validates it.
pub fn extract_rows(response: &ProviderResponse, spec: &VirtualTableSpec, expected_keys: &[KeyTuple]) -> Vec<ExtractedRow> {
    let expected: HashSet<&KeyTuple> = expected_keys.iter().collect();
    let nkeys = spec.key_attrs.len();
    let mut rows = Vec::new();
    for line in response.raw_text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some(fields) = parse_line(trimmed) else {
            rows.push(ExtractedRow::invalid(trimmed, InvalidReason::Arity, vec![], nkeys));
            continue;
        };
        if fields.len() != spec.arity() {
            rows.push(ExtractedRow::invalid(trimmed, InvalidReason::Arity, fields, nkeys));
            continue;
        }
        let mut key_values = fields;
        let raw_gen = key_values.split_off(nkeys);
        let mut gen_values = Vec::with_capacity(raw_gen.len());
        let mut reason = None;
        for (value, attr) in raw_gen.iter().zip(&spec.gen_attrs) {
            if value == "?" || split_many(value).iter().any(|p| p == "?") {
                reason.get_or_insert(InvalidReason::ResidualPlaceholder);
            }
            let canonical = match attr.cardinality {
                Cardinality::One => value.clone(),
                Cardinality::Many => split_many(value).join(", "),
            };
            if canonical.is_empty() {
                reason.get_or_insert(InvalidReason::Empty);
            }
            gen_values.push(canonical);
        }
        if key_values.iter().any(String::is_empty) || !expected.contains(&KeyTuple(key_values.clone())) {
            reason.get_or_insert(InvalidReason::UnexpectedKey);
        }
        rows.push(ExtractedRow {
            key_values,
            gen_values,
            valid: reason.is_none(),
            invalid_reason: reason,
            raw: trimmed.to_string(),
        });
    }
    rows
}

/// Generation settings stamped onto every cached row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub model_id: String,
    pub prompt_hash: String,
    pub created_at: String,
    pub k: usize,
}

/// Restricts cache hits to rows generated by a given model and k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceFilter {
    pub model_id: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub spec: String,
    pub reason: InvalidReason,
    pub raw: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaterializeSummary {
    pub inserted: usize,
    pub updated: usize,
    pub rejected: usize,
    pub rejections: Vec<Rejection>,
}

impl MaterializeSummary {
    pub fn absorb(&mut self, other: MaterializeSummary) {
        self.inserted += other.inserted;
        self.updated += other.updated;
        self.rejected += other.rejected;
        self.rejections.extend(other.rejections);
    }
}

/// Appends rejections as JSON lines.
pub fn write_rejections(path: &Path, rejections: &[Rejection]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in rejections {
        let line = serde_json::to_string(r)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cache_exists(conn: &Connection, table: &str) -> Result<bool> {
    Ok(conn
        .query_row(
            "SELECT 1 FROM sqlite_master WHERE type = 'table' AND name = ?1",
            [table],
            |_| Ok(()),
        )
        .optional()?
        .is_some())
}

/// Creates the spec's cache table and unique key index if absent.
pub fn ensure_cache_table(conn: &Connection, spec: &VirtualTableSpec, db: &DatabaseHandle) -> Result<()> {
    let (_, base_cols) = db
        .table(&spec.base_table)
        .ok_or_else(|| Error::MissingTable(spec.base_table.clone()))?;
    let mut cols = Vec::new();
    for key in spec.key_names() {
        let def = base_cols
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(key))
            .ok_or_else(|| Error::MissingColumn {
                table: spec.base_table.clone(),
                column: key.to_string(),
            })?;
        cols.push(format!("{} {}", quote_ident(key), def.decl_type).trim_end().to_string());
    }
    for g in spec.gen_names() {
        cols.push(format!("{} TEXT", quote_ident(g)));
    }
    cols.push("\"model_id\" TEXT NOT NULL".into());
    cols.push("\"prompt_hash\" TEXT NOT NULL".into());
    cols.push("\"created_at\" TEXT NOT NULL".into());
    cols.push("\"k\" INTEGER NOT NULL".into());
    let table = spec.cache_table();
    let keys: Vec<String> = spec.key_names().map(quote_ident).collect();
    conn.execute_batch(&format!(
        "CREATE TABLE IF NOT EXISTS {t} ({cols});\n\
         CREATE UNIQUE INDEX IF NOT EXISTS {idx} ON {t} ({keys});",
        t = quote_ident(&table),
        cols = cols.join(", "),
        idx = quote_ident(&format!("{table}_key")),
        keys = keys.join(", "),
    ))?;
    Ok(())
}

/// Upserts the valid rows in one transaction; invalid rows are counted,
/// logged and skipped.
pub fn materialize(rows: &[ExtractedRow], spec: &VirtualTableSpec, db: &DatabaseHandle, provenance: &Provenance) -> Result<MaterializeSummary> {
    let mut conn = db.connect()?;
    let tx = conn.transaction()?;
    ensure_cache_table(&tx, spec, db)?;
    let summary = materialize_in(&tx, rows, spec, provenance)?;
    tx.commit()?;
    Ok(summary)
}

fn materialize_in(conn: &Connection, rows: &[ExtractedRow], spec: &VirtualTableSpec, provenance: &Provenance) -> Result<MaterializeSummary> {
    let table = quote_ident(&spec.cache_table());
    let keys: Vec<String> = spec.key_names().map(quote_ident).collect();
    let gens: Vec<String> = spec.gen_names().map(quote_ident).collect();
    let all: Vec<String> = keys
        .iter()
        .chain(&gens)
        .cloned()
        .chain(["\"model_id\"", "\"prompt_hash\"", "\"created_at\"", "\"k\""].map(String::from))
        .collect();
    let placeholders: Vec<String> = (1..=all.len()).map(|i| format!("?{i}")).collect();
    let updates: Vec<String> = all[keys.len()..].iter().map(|c| format!("{c} = excluded.{c}")).collect();
    let upsert = format!(
        "INSERT INTO {table} ({}) VALUES ({}) ON CONFLICT ({}) DO UPDATE SET {}",
        all.join(", "),
        placeholders.join(", "),
        keys.join(", "),
        updates.join(", ")
    );
    let key_match: Vec<String> = keys.iter().enumerate().map(|(i, k)| format!("{k} = ?{}", i + 1)).collect();
    let exists = format!("SELECT 1 FROM {table} WHERE {}", key_match.join(" AND "));

    let mut exists_stmt = conn.prepare(&exists)?;
    let mut upsert_stmt = conn.prepare(&upsert)?;
    let mut summary = MaterializeSummary::default();
    for row in rows {
        if !row.valid {
            let reason = row.invalid_reason.unwrap_or(InvalidReason::Arity);
            tracing::info!(spec = %spec.name, %reason, raw = %row.raw, "rejected generated row");
            summary.rejected += 1;
            summary.rejections.push(Rejection {
                spec: spec.name.clone(),
                reason,
                raw: row.raw.clone(),
            });
            continue;
        }
        let present = exists_stmt
            .query_row(rusqlite::params_from_iter(&row.key_values), |_| Ok(()))
            .optional()?
            .is_some();
        let mut values: Vec<rusqlite::types::Value> = row
            .key_values
            .iter()
            .chain(&row.gen_values)
            .map(|v| v.clone().into())
            .collect();
        values.push(provenance.model_id.clone().into());
        values.push(provenance.prompt_hash.clone().into());
        values.push(provenance.created_at.clone().into());
        values.push((provenance.k as i64).into());
        upsert_stmt.execute(rusqlite::params_from_iter(values))?;
        if present {
            summary.updated += 1;
        } else {
            summary.inserted += 1;
        }
    }
    Ok(summary)
}

/// Extracts and materializes every usable outcome of a generation run, and
/// logs all requests, in one transaction.
pub fn materialize_outcomes(
    outcomes: &[BatchOutcome],
    spec: &VirtualTableSpec,
    db: &DatabaseHandle,
    model_id: &str,
    created_at: &str,
) -> Result<MaterializeSummary> {
    let mut conn = db.connect()?;
    let tx = conn.transaction()?;
    ensure_cache_table(&tx, spec, db)?;
    ensure_request_log(&tx)?;
    let mut summary = MaterializeSummary::default();
    for o in outcomes {
        log_request(&tx, spec, model_id, created_at, o)?;
        if !o.usable() {
            continue;
        }
        let rows = extract_rows(&o.response, spec, &o.targets);
        let provenance = Provenance {
            model_id: model_id.to_string(),
            prompt_hash: o.prompt_hash.clone(),
            created_at: created_at.to_string(),
            k: o.k,
        };
        summary.absorb(materialize_in(&tx, &rows, spec, &provenance)?);
    }
    tx.commit()?;
    Ok(summary)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheSplit {
    pub hits: Vec<KeyTuple>,
    pub misses: Vec<KeyTuple>,
}

fn cached_rows(conn: &Connection, spec: &VirtualTableSpec, filter: Option<&ProvenanceFilter>) -> Result<BTreeMap<KeyTuple, Vec<String>>> {
    let table = spec.cache_table();
    let mut out = BTreeMap::new();
    if !cache_exists(conn, &table)? {
        return Ok(out);
    }
    let cols: Vec<String> = spec.key_names().chain(spec.gen_names()).map(quote_ident).collect();
    let mut sql = format!("SELECT {} FROM {}", cols.join(", "), quote_ident(&table));
    if filter.is_some() {
        sql.push_str(" WHERE \"model_id\" = ?1 AND \"k\" = ?2");
    }
    let mut stmt = conn.prepare(&sql)?;
    let nkeys = spec.key_attrs.len();
    let map_row = |row: &rusqlite::Row<'_>| -> rusqlite::Result<(KeyTuple, Vec<String>)> {
        let mut vals = Vec::with_capacity(cols.len());
        for i in 0..cols.len() {
            vals.push(value_to_text(row.get_ref(i)?)?);
        }
        let gens = vals.split_off(nkeys);
        Ok((KeyTuple(vals), gens))
    };
    let rows = match filter {
        Some(f) => stmt.query_map(params![f.model_id, f.k as i64], map_row)?.collect::<rusqlite::Result<Vec<_>>>()?,
        None => stmt.query_map([], map_row)?.collect::<rusqlite::Result<Vec<_>>>()?,
    };
    out.extend(rows);
    Ok(out)
}

/// Every cached row of the spec, keyed by key tuple.
pub fn read_cache(spec: &VirtualTableSpec, db: &DatabaseHandle) -> Result<BTreeMap<KeyTuple, Vec<String>>> {
    cached_rows(&db.connect()?, spec, None)
}

/// Splits `keys` into those already cached and those needing generation.
/// With a filter, rows from other models or k count as misses.
pub fn cache_lookup(spec: &VirtualTableSpec, keys: &[KeyTuple], db: &DatabaseHandle, filter: Option<&ProvenanceFilter>) -> Result<CacheSplit> {
    let cached = cached_rows(&db.connect()?, spec, filter)?;
    let mut split = CacheSplit::default();
    for key in keys {
        if cached.contains_key(key) {
            split.hits.push(key.clone());
        } else {
            split.misses.push(key.clone());
        }
    }
    Ok(split)
}

/// Token counts of one logged request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub spec: String,
    pub prompt_hash: String,
    pub input_tokens_estimated: u64,
    pub output_tokens_estimated: u64,
    pub input_tokens_reported: Option<u64>,
    pub output_tokens_reported: Option<u64>,
}

impl UsageRecord {
    pub fn from_outcome(spec: &str, o: &BatchOutcome) -> Self {
        UsageRecord {
            spec: spec.to_string(),
            prompt_hash: o.prompt_hash.clone(),
            input_tokens_estimated: o.input_tokens_estimated as u64,
            output_tokens_estimated: o.output_tokens_estimated as u64,
            input_tokens_reported: o.response.input_tokens_reported,
            output_tokens_reported: o.response.output_tokens_reported,
        }
    }
}

fn ensure_request_log(conn: &Connection) -> Result<()> {
    conn.execute_batch(&format!(
        "CREATE TABLE IF NOT EXISTS {} (\
         \"id\" INTEGER PRIMARY KEY, \"spec\" TEXT NOT NULL, \"model_id\" TEXT NOT NULL, \
         \"k\" INTEGER NOT NULL, \"prompt_hash\" TEXT NOT NULL, \"targets\" TEXT NOT NULL, \
         \"input_tokens_estimated\" INTEGER NOT NULL, \"output_tokens_estimated\" INTEGER NOT NULL, \
         \"input_tokens_reported\" INTEGER, \"output_tokens_reported\" INTEGER, \
         \"truncated\" INTEGER NOT NULL, \"created_at\" TEXT NOT NULL)",
        quote_ident(REQUEST_LOG_TABLE)
    ))?;
    Ok(())
}

fn log_request(conn: &Connection, spec: &VirtualTableSpec, model_id: &str, created_at: &str, o: &BatchOutcome) -> Result<()> {
    conn.execute(
        &format!(
            "INSERT INTO {} (\"spec\", \"model_id\", \"k\", \"prompt_hash\", \"targets\", \
             \"input_tokens_estimated\", \"output_tokens_estimated\", \"input_tokens_reported\", \
             \"output_tokens_reported\", \"truncated\", \"created_at\") \
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)",
            quote_ident(REQUEST_LOG_TABLE)
        ),
        params![
            spec.name,
            model_id,
            o.k as i64,
            o.prompt_hash,
            serde_json::to_string(&o.targets)?,
            o.input_tokens_estimated as i64,
            o.output_tokens_estimated as i64,
            o.response.input_tokens_reported.map(|n| n as i64),
            o.response.output_tokens_reported.map(|n| n as i64),
            o.response.truncated,
            created_at,
        ],
    )?;
    Ok(())
}

/// Logged requests for `spec` under `filter` whose targets overlap `keys`,
/// in log order. An id set lets callers deduplicate across queries.
pub fn requests_for_keys(
    spec: &VirtualTableSpec,
    keys: &BTreeSet<KeyTuple>,
    db: &DatabaseHandle,
    filter: &ProvenanceFilter,
) -> Result<Vec<(i64, UsageRecord)>> {
    let conn = db.connect()?;
    if !cache_exists(&conn, REQUEST_LOG_TABLE)? {
        return Ok(Vec::new());
    }
    let mut stmt = conn.prepare(&format!(
        "SELECT \"id\", \"targets\", \"prompt_hash\", \"input_tokens_estimated\", \"output_tokens_estimated\", \
         \"input_tokens_reported\", \"output_tokens_reported\" FROM {} \
         WHERE \"spec\" = ?1 AND \"model_id\" = ?2 AND \"k\" = ?3 ORDER BY \"id\"",
        quote_ident(REQUEST_LOG_TABLE)
    ))?;
    let rows = stmt
        .query_map(params![spec.name, filter.model_id, filter.k as i64], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, String>(1)?,
                UsageRecord {
                    spec: spec.name.clone(),
                    prompt_hash: r.get(2)?,
                    input_tokens_estimated: r.get::<_, i64>(3)? as u64,
                    output_tokens_estimated: r.get::<_, i64>(4)? as u64,
                    input_tokens_reported: r.get::<_, Option<i64>>(5)?.map(|n| n as u64),
                    output_tokens_reported: r.get::<_, Option<i64>>(6)?.map(|n| n as u64),
                },
            ))
        })?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (id, targets, usage) in rows {
        let targets: Vec<KeyTuple> = serde_json::from_str(&targets)?;
        if targets.iter().any(|t| keys.contains(t)) {
            out.push((id, usage));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{AttributeSpec, KeyAttr, ValueDomain};
    use proptest::prelude::*;

    fn spec() -> VirtualTableSpec {
        VirtualTableSpec {
            name: "hero".into(),
            database: "t".into(),
            base_table: "superhero".into(),
            task_instruction: "x".into(),
            key_attrs: vec![
                KeyAttr { name: "superhero_name".into(), semantic_type: "text".into() },
                KeyAttr { name: "full_name".into(), semantic_type: "text".into() },
            ],
            gen_attrs: vec![AttributeSpec {
                name: "publisher_name".into(),
                domain: ValueDomain::Free,
                cardinality: Cardinality::One,
            }],
            fewshot_pool: vec![],
        }
    }

    fn many_spec() -> VirtualTableSpec {
        let mut s = spec();
        s.gen_attrs[0].cardinality = Cardinality::Many;
        s
    }

    fn response(text: &str) -> ProviderResponse {
        ProviderResponse {
            raw_text: text.into(),
            input_tokens_reported: None,
            output_tokens_reported: None,
            truncated: false,
        }
    }

    fn kt(a: &str, b: &str) -> KeyTuple {
        KeyTuple::new([a, b])
    }

    fn db() -> (tempfile::TempDir, DatabaseHandle) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.db");
        Connection::open(&path)
            .unwrap()
            .execute_batch("CREATE TABLE superhero (id INTEGER, superhero_name TEXT, full_name TEXT)")
            .unwrap();
        let db = DatabaseHandle::open("t", &path).unwrap();
        (dir, db)
    }

    fn prov() -> Provenance {
        Provenance {
            model_id: "m".into(),
            prompt_hash: "h".into(),
            created_at: "2024-01-01T00:00:00Z".into(),
            k: 0,
        }
    }

    #[test]
    fn extraction_cases() {
        let expected = [kt("Spider-Man", "Peter Parker"), kt("Hulk", "Bruce Banner")];
        let rows = extract_rows(
            &response("Spider-Man,Peter Parker,Marvel Comics\nHulk,Bruce Banner,?\n\nHulk,Bruce Banner,Marvel,Extra\nThor,Thor Odinson,Marvel Comics\nHulk,Bruce Banner,"),
            &spec(),
            &expected,
        );
        let reasons: Vec<Option<InvalidReason>> = rows.iter().map(|r| r.invalid_reason).collect();
        assert_eq!(
            reasons,
            [
                None,
                Some(InvalidReason::ResidualPlaceholder),
                Some(InvalidReason::Arity),
                Some(InvalidReason::UnexpectedKey),
                Some(InvalidReason::Empty),
            ]
        );
        assert!(rows[0].valid);
        assert_eq!(rows[0].gen_values, ["Marvel Comics"]);
    }

    #[test]
    fn quoting_and_many_canonicalization() {
        let expected = [kt("3-D Man", "Charles Chandler")];
        let rows = extract_rows(
            &response("3-D Man , Charles Chandler ,\"Agility, Super Strength,Super Speed\""),
            &many_spec(),
            &expected,
        );
        assert!(rows[0].valid, "{rows:?}");
        assert_eq!(rows[0].gen_values, ["Agility, Super Strength, Super Speed"]);
    }

    #[test]
    fn condense_examples() {
        assert_eq!(condense_many(&["Agility", "Super Strength", "Super Speed"]).unwrap(), "Agility, Super Strength, Super Speed");
        assert_eq!(condense_many::<&str>(&[]).unwrap(), "");
        assert_eq!(condense_many(&["Flight"]).unwrap(), "Flight");
        assert!(matches!(condense_many(&["a,b"]), Err(Error::EmbeddedComma(_))));
    }

    #[test]
    fn materialize_counts_and_upsert() {
        let (_d, db) = db();
        let expected = [kt("A", "a"), kt("B", "b"), kt("C", "c")];
        let rows = extract_rows(&response("A,a,x\nB,b,y\nC,c,?"), &spec(), &expected);
        let s = materialize(&rows, &spec(), &db, &prov()).unwrap();
        assert_eq!((s.inserted, s.updated, s.rejected), (2, 0, 1));
        assert_eq!(s.rejections[0].reason, InvalidReason::ResidualPlaceholder);

        let rows = extract_rows(&response("A,a,z"), &spec(), &expected);
        let s = materialize(&rows, &spec(), &db, &prov()).unwrap();
        assert_eq!((s.inserted, s.updated), (0, 1));
        let cache = read_cache(&spec(), &db).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache[&kt("A", "a")], ["z"]);
    }

    #[test]
    fn empty_materialize_creates_table() {
        let (_d, db) = db();
        materialize(&[], &spec(), &db, &prov()).unwrap();
        let conn = db.connect().unwrap();
        let cols = crate::catalog::table_columns(&conn, "llm_cache_hero").unwrap();
        let names: Vec<&str> = cols.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["superhero_name", "full_name", "publisher_name", "model_id", "prompt_hash", "created_at", "k"]);
        assert_eq!(cols[0].decl_type, "TEXT");
        assert!(read_cache(&spec(), &db).unwrap().is_empty());
    }

    #[test]
    fn lookup_split_and_provenance() {
        let (_d, db) = db();
        let keys = [kt("A", "a"), kt("B", "b"), kt("C", "c")];
        assert_eq!(cache_lookup(&spec(), &keys, &db, None).unwrap().misses.len(), 3);
        let rows = extract_rows(&response("A,a,x\nB,b,y"), &spec(), &keys);
        materialize(&rows, &spec(), &db, &prov()).unwrap();
        let split = cache_lookup(&spec(), &keys, &db, None).unwrap();
        assert_eq!(split.hits, [kt("A", "a"), kt("B", "b")]);
        assert_eq!(split.misses, [kt("C", "c")]);
        let other = ProvenanceFilter { model_id: "m".into(), k: 1 };
        assert_eq!(cache_lookup(&spec(), &keys, &db, Some(&other)).unwrap().hits.len(), 0);
        let same = ProvenanceFilter { model_id: "m".into(), k: 0 };
        assert_eq!(cache_lookup(&spec(), &keys, &db, Some(&same)).unwrap().hits.len(), 2);
    }

    #[test]
    fn rejection_log_is_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rej.jsonl");
        let r = Rejection { spec: "hero".into(), reason: InvalidReason::Arity, raw: "a,b".into() };
        write_rejections(&path, &[r.clone(), r]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["reason"], "arity");
    }

    proptest! {
        #[test]
        fn condense_split_round_trip(values in prop::collection::vec("[A-Za-z][A-Za-z ]{0,8}[A-Za-z]", 0..6)) {
            let condensed = condense_many(&values).unwrap();
            prop_assert_eq!(split_many(&condensed), values);
        }

        #[test]
        fn lookup_partitions(cached in prop::collection::btree_set(0u8..20, 0..20), asked in prop::collection::btree_set(0u8..20, 0..20)) {
            let (_d, db) = db();
            let all: Vec<KeyTuple> = (0u8..20).map(|i| kt(&format!("h{i}"), "x")).collect();
            let text: Vec<String> = cached.iter().map(|i| format!("h{i},x,v")).collect();
            let rows = extract_rows(&response(&text.join("\n")), &spec(), &all);
            materialize(&rows, &spec(), &db, &prov()).unwrap();
            let keys: Vec<KeyTuple> = asked.iter().map(|i| kt(&format!("h{i}"), "x")).collect();
            let split = cache_lookup(&spec(), &keys, &db, None).unwrap();
            prop_assert_eq!(split.hits.len() + split.misses.len(), keys.len());
            for k in &keys {
                prop_assert!(split.hits.contains(k) != split.misses.contains(k));
            }
            for h in &split.hits {
                let i: u8 = h.values()[0][1..].parse().unwrap();
                prop_assert!(cached.contains(&i));
            }
        }

        #[test]
        fn cache_stays_unique_and_valid(batches in prop::collection::vec(prop::collection::vec((0u8..6, prop::sample::select(vec!["v", "?", "", "w,extra"])), 0..8), 1..5)) {
            let (_d, db) = db();
            let all: Vec<KeyTuple> = (0u8..6).map(|i| kt(&format!("h{i}"), "x")).collect();
            for batch in batches {
                let text: Vec<String> = batch.iter().map(|(i, v)| format!("h{i},x,{v}")).collect();
                let rows = extract_rows(&response(&text.join("\n")), &spec(), &all);
                materialize(&rows, &spec(), &db, &prov()).unwrap();
            }
            let conn = db.connect().unwrap();
            let dupes: i64 = conn.query_row(
                "SELECT COUNT(*) FROM (SELECT 1 FROM llm_cache_hero GROUP BY superhero_name, full_name HAVING COUNT(*) > 1)",
                [], |r| r.get(0)).unwrap_or(0);
            prop_assert_eq!(dupes, 0);
            for (key, gens) in read_cache(&spec(), &db).unwrap() {
                let line = format!("{},{},{}", key.values()[0], key.values()[1], gens[0]);
                let again = extract_rows(&response(&line), &spec(), &all);
                prop_assert!(again[0].valid);
            }
        }
    }
}
