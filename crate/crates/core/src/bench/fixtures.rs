//! Mock fixtures transcribed from a gold value store.

use crate::catalog::VirtualTableSpec;
use crate::error::{Error, Result};
use crate::evaluator::GoldValueStore;
use crate::generation::{csv_row, FixtureEntry, FixtureSet, KeyTuple};
use crate::materializer::condense_many;

/// The response line a perfect model would give for `key`.
pub fn oracle_line(key: &KeyTuple, values: &[String]) -> String {
    csv_row(key.values().iter().chain(values))
}

/// One single-key fixture per gold row, valid for any k. Many-valued gold
/// sets are condensed; an empty gold set becomes an empty field, which the
/// materializer rejects.
pub fn oracle_fixtures<'a>(specs: impl IntoIterator<Item = &'a VirtualTableSpec>, gold: &GoldValueStore) -> Result<FixtureSet> {
    let mut set = FixtureSet::new();
    for spec in specs {
        let g = gold
            .spec(&spec.name)
            .ok_or_else(|| Error::Data(format!("gold store has no entry for `{}`", spec.name)))?;
        for row in &g.rows {
            let values = row.values.iter().map(|v| condense_many(v)).collect::<Result<Vec<_>>>()?;
            set.insert(FixtureEntry {
                spec: spec.name.clone(),
                k: None,
                keys: vec![row.key.clone()],
                response: oracle_line(&row.key, &values),
                truncated: false,
            });
        }
    }
    Ok(set)
}
