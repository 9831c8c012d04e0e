use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::{quote_ident, value_to_text, DatabaseHandle, VirtualTableSpec};
use crate::error::{Error, Result};
use crate::sql_frontend::{extract_pushdown_predicates, HybridQueryAst};

/// Key values of one entity, aligned with `VirtualTableSpec::key_attrs`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyTuple(pub Vec<String>);

impl KeyTuple {
    pub fn new<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        KeyTuple(values.into_iter().map(Into::into).collect())
    }

    pub fn values(&self) -> &[String] {
        &self.0
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for KeyTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    /// Every distinct key of the base table.
    Full,
    /// Only keys admitted by the query's pushable base-table predicates.
    Pushdown,
}

impl std::str::FromStr for PlanMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(PlanMode::Full),
            "pushdown" => Ok(PlanMode::Pushdown),
            other => Err(format!("unknown mode `{other}` (expected full or pushdown)")),
        }
    }
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanMode::Full => "full",
            PlanMode::Pushdown => "pushdown",
        })
    }
}

/// Returns the key tuples whose generated values the query may need,
/// sorted and duplicate-free.
pub fn plan_keys(
    ast: &HybridQueryAst,
    db: &DatabaseHandle,
    spec: &VirtualTableSpec,
    mode: PlanMode,
) -> Result<Vec<KeyTuple>> {
    if mode == PlanMode::Full {
        return all_keys(db, spec);
    }
    let restriction = extract_pushdown_predicates(ast, spec);
    if restriction.is_unrestricted() {
        return all_keys(db, spec);
    }
    let mut keys = Vec::new();
    for branch in &restriction.branches {
        let anchor = branch.anchor.as_deref().unwrap_or(&spec.base_table);
        let cols: Vec<String> = spec
            .key_names()
            .map(|k| format!("{}.{}", quote_ident(anchor), quote_ident(k)))
            .collect();
        let conditions: Vec<String> = branch.predicates.iter().map(|p| format!("({})", p.sql)).collect();
        let sql = format!(
            "SELECT DISTINCT {} FROM {} AS {} WHERE {}",
            cols.join(", "),
            quote_ident(&spec.base_table),
            quote_ident(anchor),
            conditions.join(" AND ")
        );
        match select_keys(db, &sql, spec.key_attrs.len()) {
            Ok(found) => keys.extend(found),
            Err(e) => {
                tracing::warn!(spec = %spec.name, error = %e, "pushdown predicate failed; generating all keys");
                return all_keys(db, spec);
            }
        }
    }
    keys.sort();
    keys.dedup();
    Ok(keys)
}

pub fn all_keys(db: &DatabaseHandle, spec: &VirtualTableSpec) -> Result<Vec<KeyTuple>> {
    let cols: Vec<String> = spec.key_names().map(quote_ident).collect();
    let sql = format!(
        "SELECT DISTINCT {} FROM {}",
        cols.join(", "),
        quote_ident(&spec.base_table)
    );
    let mut keys = select_keys(db, &sql, cols.len())?;
    keys.sort();
    keys.dedup();
    Ok(keys)
}

fn select_keys(db: &DatabaseHandle, sql: &str, arity: usize) -> Result<Vec<KeyTuple>> {
    let conn = db.connect()?;
    let mut stmt = conn.prepare(sql).map_err(|e| Error::Execution(e.to_string()))?;
    let rows = stmt.query_map([], |row| {
        let mut values = Vec::with_capacity(arity);
        let mut complete = true;
        for i in 0..arity {
            let v = row.get_ref(i)?;
            complete &= !matches!(v, rusqlite::types::ValueRef::Null);
            values.push(value_to_text(v)?);
        }
        Ok(complete.then_some(KeyTuple(values)))
    })?;
    let mut out = Vec::new();
    for row in rows {
        if let Some(k) = row? {
            if k.0.iter().all(|v| !v.trim().is_empty()) {
                out.push(k);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{AttributeSpec, Cardinality, Catalog, KeyAttr, ValueDomain};
    use crate::sql_frontend::parse_hybrid;
    use rusqlite::Connection;
    use std::collections::BTreeSet;

    fn setup() -> (tempfile::TempDir, Catalog) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.db");
        Connection::open(&path)
            .unwrap()
            .execute_batch(
                "CREATE TABLE superhero(superhero_name TEXT, full_name TEXT, height_cm INT, eye TEXT);
                 INSERT INTO superhero VALUES
                   ('Spider-Man','Peter Parker',178,'brown'),
                   ('Captain Marvel','Carol Danvers',180,'blue'),
                   ('Captain Marvel','Billy Batson',190,'blue'),
                   ('Aquaman','Arthur Curry',185,'blue'),
                   ('Thor','Thor Odinson',198,'blue');",
            )
            .unwrap();
        let mut c = Catalog::new();
        c.add_database(DatabaseHandle::open("h", &path).unwrap()).unwrap();
        c.add_spec(VirtualTableSpec {
            name: "llm".into(),
            database: "h".into(),
            base_table: "superhero".into(),
            task_instruction: "x".into(),
            key_attrs: vec![
                KeyAttr { name: "superhero_name".into(), semantic_type: "text".into() },
                KeyAttr { name: "full_name".into(), semantic_type: "text".into() },
            ],
            gen_attrs: vec![AttributeSpec {
                name: "publisher".into(),
                domain: ValueDomain::Free,
                cardinality: Cardinality::One,
            }],
            fewshot_pool: vec![],
        })
        .unwrap();
        (dir, c)
    }

    const JOIN: &str = "SELECT s.full_name FROM llm JOIN superhero s \
        ON llm.superhero_name = s.superhero_name AND llm.full_name = s.full_name";

    /// Brute force: pull every base row into memory and filter in Rust.
    fn oracle(c: &Catalog, keep: impl Fn(&str, &str, i64, &str) -> bool) -> Vec<KeyTuple> {
        let conn = c.database("h").unwrap().connect().unwrap();
        let mut stmt = conn.prepare("SELECT superhero_name, full_name, height_cm, eye FROM superhero").unwrap();
        let set: BTreeSet<KeyTuple> = stmt
            .query_map([], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, i64>(2)?, r.get::<_, String>(3)?))
            })
            .unwrap()
            .map(Result::unwrap)
            .filter(|(a, b, h, e)| keep(a, b, *h, e))
            .map(|(a, b, _, _)| KeyTuple::new([a, b]))
            .collect();
        set.into_iter().collect()
    }

    fn plan(c: &Catalog, sql: &str, mode: PlanMode) -> Vec<KeyTuple> {
        let db = c.database("h").unwrap();
        let ast = parse_hybrid(sql, c, db).unwrap();
        plan_keys(&ast, db, c.spec("llm").unwrap(), mode).unwrap()
    }

    #[test]
    fn full_mode_is_all_distinct_keys() {
        let (_d, c) = setup();
        let keys = plan(&c, "SELECT * FROM llm", PlanMode::Full);
        assert_eq!(keys.len(), 5);
        assert_eq!(keys, oracle(&c, |_, _, _, _| true));
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn duplicate_non_key_columns_do_not_inflate() {
        // Four rows share eye = 'blue'; keys stay distinct.
        let (_d, c) = setup();
        let keys = plan(&c, &format!("{JOIN} WHERE s.eye = 'blue'"), PlanMode::Pushdown);
        assert_eq!(keys, oracle(&c, |_, _, _, e| e == "blue"));
        assert_eq!(keys.len(), 4);
    }

    #[test]
    fn pushdown_equality_selects_one() {
        let (_d, c) = setup();
        let keys = plan(&c, &format!("{JOIN} WHERE s.superhero_name = 'Spider-Man'"), PlanMode::Pushdown);
        assert_eq!(keys, oracle(&c, |n, _, _, _| n == "Spider-Man"));
        assert_eq!(keys, [KeyTuple::new(["Spider-Man", "Peter Parker"])]);
    }

    #[test]
    fn pushdown_on_virtual_key_columns() {
        let (_d, c) = setup();
        let keys = plan(&c, "SELECT publisher FROM llm WHERE superhero_name = 'Captain Marvel'", PlanMode::Pushdown);
        assert_eq!(keys, oracle(&c, |n, _, _, _| n == "Captain Marvel"));
        assert_eq!(keys.len(), 2);
    }

    #[test]
    fn pushdown_range_and_conjunction() {
        let (_d, c) = setup();
        let sql = format!("{JOIN} WHERE s.height_cm >= 180 AND s.superhero_name LIKE 'Captain%' AND llm.publisher = 'DC Comics'");
        let keys = plan(&c, &sql, PlanMode::Pushdown);
        assert_eq!(keys, oracle(&c, |n, _, h, _| h >= 180 && n.starts_with("Captain")));
        assert_eq!(keys.len(), 2);
    }

    #[test]
    fn pushdown_without_usable_predicate_is_full() {
        let (_d, c) = setup();
        let full = plan(&c, JOIN, PlanMode::Full);
        assert_eq!(plan(&c, &format!("{JOIN} WHERE llm.publisher = 'Marvel'"), PlanMode::Pushdown), full);
    }

    #[test]
    fn full_is_superset_of_pushdown() {
        let (_d, c) = setup();
        for pred in ["s.height_cm > 185", "s.eye = 'brown'", "s.full_name = 'nobody'", "s.height_cm < 0 OR s.eye = 'blue'"] {
            let sql = format!("{JOIN} WHERE {pred}");
            let full: BTreeSet<_> = plan(&c, &sql, PlanMode::Full).into_iter().collect();
            let push = plan(&c, &sql, PlanMode::Pushdown);
            let push_set: BTreeSet<_> = push.iter().cloned().collect();
            assert_eq!(push_set.len(), push.len());
            assert!(push_set.is_subset(&full), "{pred}");
        }
    }
}
