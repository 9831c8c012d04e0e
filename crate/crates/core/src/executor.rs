//! Executes SQL against a database and compares result tables.

use std::cmp::Ordering;
use std::fmt;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};

use crate::catalog::{DatabaseHandle, CACHE_PREFIX};
use crate::error::{Error, Result};
use crate::sql_frontend::has_top_level_order_by;

/// Wall-clock cap applied by [`execute_sql`].
pub const DEFAULT_QUERY_TIMEOUT: Duration = Duration::from_secs(30);

const REL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    #[serde(skip)]
    Blob(Vec<u8>),
}

impl Cell {
    fn from_ref(v: ValueRef<'_>) -> Cell {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(f) => Cell::Real(f),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }

    fn number(&self) -> Option<f64> {
        match self {
            Cell::Integer(i) => Some(*i as f64),
            Cell::Real(f) => Some(*f),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Integer(_) | Cell::Real(_) => 1,
            Cell::Text(_) => 2,
            Cell::Blob(_) => 3,
        }
    }

    /// Equality used by comparisons: numbers within a relative tolerance,
    /// everything else exact, NULL only equal to NULL.
    pub fn matches(&self, other: &Cell) -> bool {
        match (self.number(), other.number()) {
            (Some(a), Some(b)) => close(a, b),
            _ => match (self, other) {
                (Cell::Null, Cell::Null) => true,
                (Cell::Text(a), Cell::Text(b)) => a == b,
                (Cell::Blob(a), Cell::Blob(b)) => a == b,
                _ => false,
            },
        }
    }

    /// A total order consistent with storage class then value.
    fn order(&self, other: &Cell) -> Ordering {
        self.rank().cmp(&other.rank()).then_with(|| match (self, other) {
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (Cell::Blob(a), Cell::Blob(b)) => a.cmp(b),
            _ => match (self.number(), other.number()) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                _ => Ordering::Equal,
            },
        })
    }
}

fn close(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    let scale = a.abs().max(b.abs());
    (a - b).abs() <= REL_TOLERANCE * scale
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Integer(i) => write!(f, "{i}"),
            Cell::Real(x) => write!(f, "{x}"),
            Cell::Text(s) => write!(f, "{s:?}"),
            Cell::Blob(b) => write!(f, "<blob {} bytes>", b.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    /// The producing query had a top-level ORDER BY.
    #[serde(default)]
    pub ordered: bool,
}

impl ResultTable {
    pub fn render(&self) -> String {
        let mut out = self.columns.join(" | ");
        for row in &self.rows {
            out.push('\n');
            out.push_str(&row.iter().map(Cell::to_string).collect::<Vec<_>>().join(" | "));
        }
        out
    }
}

/// Runs `sql` with the default timeout.
pub fn execute_sql(sql: &str, db: &DatabaseHandle) -> Result<ResultTable> {
    execute_sql_with_timeout(sql, db, DEFAULT_QUERY_TIMEOUT)
}

pub fn execute_sql_with_timeout(sql: &str, db: &DatabaseHandle, timeout: Duration) -> Result<ResultTable> {
    let conn = db.connect()?;
    let deadline = Instant::now() + timeout;
    conn.progress_handler(10_000, Some(move || Instant::now() > deadline))?;
    let run = || -> rusqlite::Result<ResultTable> {
        let mut stmt = conn.prepare(sql)?;
        let columns: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
        let width = columns.len();
        let mut rows = Vec::new();
        let mut cursor = stmt.query([])?;
        while let Some(row) = cursor.next()? {
            let mut cells = Vec::with_capacity(width);
            for i in 0..width {
                cells.push(Cell::from_ref(row.get_ref(i)?));
            }
            rows.push(cells);
        }
        Ok(ResultTable {
            columns,
            rows,
            ordered: false,
        })
    };
    let mut table = run().map_err(|e| map_error(e, timeout))?;
    table.ordered = has_top_level_order_by(sql);
    Ok(table)
}

fn map_error(e: rusqlite::Error, timeout: Duration) -> Error {
    let message = e.to_string();
    if let Some(rest) = message.strip_prefix("no such table: ") {
        if let Some(spec) = rest.strip_prefix(CACHE_PREFIX) {
            return Error::MissingCache {
                table: rest.to_string(),
                spec: spec.to_string(),
            };
        }
    }
    if matches!(e.sqlite_error_code(), Some(rusqlite::ErrorCode::OperationInterrupted)) {
        return Error::Execution(format!("query exceeded the {}s time cap", timeout.as_secs_f64()));
    }
    Error::Execution(message)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub equal: bool,
    /// Where the tables first differ; empty when equal.
    pub diagnostic: String,
}

fn row_order(a: &[Cell], b: &[Cell]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.order(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn row_matches(a: &[Cell], b: &[Cell]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| !x.matches(y))
}

fn render_row(row: &[Cell]) -> String {
    format!("({})", row.iter().map(Cell::to_string).collect::<Vec<_>>().join(", "))
}

/// Compares positionally, ignoring column names. Row order matters only
/// when `gold.ordered` is set; otherwise rows compare as multisets.
pub fn compare_results(got: &ResultTable, gold: &ResultTable) -> Comparison {
    let fail = |diagnostic: String| Comparison { equal: false, diagnostic };
    if got.columns.len() != gold.columns.len() {
        return fail(format!("column count {} != gold {}", got.columns.len(), gold.columns.len()));
    }
    if got.rows.len() != gold.rows.len() {
        return fail(format!("row count {} != gold {}", got.rows.len(), gold.rows.len()));
    }
    let (a, b, label): (Vec<&Vec<Cell>>, Vec<&Vec<Cell>>, &str) = if gold.ordered {
        (got.rows.iter().collect(), gold.rows.iter().collect(), "row")
    } else {
        let mut a: Vec<&Vec<Cell>> = got.rows.iter().collect();
        let mut b: Vec<&Vec<Cell>> = gold.rows.iter().collect();
        a.sort_by(|x, y| row_order(x, y));
        b.sort_by(|x, y| row_order(x, y));
        (a, b, "sorted row")
    };
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        if let Some(col) = row_matches(x, y) {
            return fail(format!(
                "{label} {i}, column {col} ({}): got {} ({}), gold {} ({})",
                gold.columns[col],
                x[col],
                render_row(x),
                y[col],
                render_row(y)
            ));
        }
    }
    Comparison {
        equal: true,
        diagnostic: String::new(),
    }
}
