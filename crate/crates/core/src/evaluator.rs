//! Metrics: execution accuracy, data factuality F1 and token cost.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{Cardinality, DatabaseHandle, VirtualTableSpec};
use crate::error::{Error, Result};
use crate::generation::KeyTuple;
use crate::materializer::{read_cache, split_many, UsageRecord};

pub const GOLD_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// F1 of one generated cell against its gold value set.
///
/// One-valued cells score 1 on a trimmed exact match and 0 otherwise.
/// Many-valued cells split the prediction on commas and score set F1.
/// An empty prediction or empty gold set scores 0.
pub fn cell_f1(predicted: &str, gold: &BTreeSet<String>, cardinality: Cardinality) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    match cardinality {
        Cardinality::One => {
            let p = predicted.trim();
            if !p.is_empty() && gold.iter().any(|g| g.trim() == p) {
                1.0
            } else {
                0.0
            }
        }
        Cardinality::Many => {
            let pred: BTreeSet<String> = split_many(predicted).into_iter().collect();
            let gold: BTreeSet<&str> = gold.iter().map(|g| g.trim()).collect();
            if pred.is_empty() {
                return 0.0;
            }
            let hit = pred.iter().filter(|p| gold.contains(p.as_str())).count() as f64;
            if hit == 0.0 {
                return 0.0;
            }
            let precision = hit / pred.len() as f64;
            let recall = hit / gold.len() as f64;
            2.0 * precision * recall / (precision + recall)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRow {
    pub key: KeyTuple,
    /// One value set per attribute, aligned with `GoldSpec::attributes`.
    pub values: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpec {
    pub database: String,
    pub attributes: Vec<String>,
    pub rows: Vec<GoldRow>,
}

impl GoldSpec {
    pub fn lookup(&self) -> BTreeMap<&KeyTuple, &[Vec<String>]> {
        self.rows.iter().map(|r| (&r.key, r.values.as_slice())).collect()
    }
}

/// Ground-truth generated values per spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldValueStore {
    pub format_version: u32,
    pub specs: BTreeMap<String, GoldSpec>,
}

impl Default for GoldValueStore {
    fn default() -> Self {
        GoldValueStore {
            format_version: GOLD_FORMAT_VERSION,
            specs: BTreeMap::new(),
        }
    }
}

impl GoldValueStore {
    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, name: &str) -> Option<&GoldSpec> {
        self.specs.get(name)
    }

    pub fn merge(&mut self, other: GoldValueStore) {
        self.specs.extend(other.specs);
    }

    pub fn from_json_str(text: &str, source: &str) -> Result<Self> {
        let store: GoldValueStore = serde_json::from_str(text).map_err(|e| Error::config(source, e))?;
        if store.format_version != GOLD_FORMAT_VERSION {
            return Err(Error::config(source, format!("unsupported format_version {}", store.format_version)));
        }
        for (name, spec) in &store.specs {
            let mut seen = BTreeSet::new();
            for row in &spec.rows {
                if row.values.len() != spec.attributes.len() {
                    return Err(Error::config(source, format!("gold row ({}) of `{name}` has wrong arity", row.key)));
                }
                if !seen.insert(&row.key) {
                    return Err(Error::config(source, format!("duplicate gold key ({}) in `{name}`", row.key)));
                }
            }
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Pretty JSON with rows sorted by key.
    pub fn to_json_string(&self) -> String {
        let mut sorted = self.clone();
        for spec in sorted.specs.values_mut() {
            spec.rows.sort_by(|a, b| a.key.cmp(&b.key));
        }
        let mut s = serde_json::to_string_pretty(&sorted).expect("gold store serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFactuality {
    pub database: String,
    /// Scored (key, attribute) cells.
    pub cells: usize,
    pub f1_sum: f64,
    /// Gold keys with no cached row.
    pub missing_rows: usize,
}

impl SpecFactuality {
    pub fn f1(&self) -> f64 {
        if self.cells == 0 {
            0.0
        } else {
            self.f1_sum / self.cells as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FactualityReport {
    pub per_spec: BTreeMap<String, SpecFactuality>,
    pub per_database: BTreeMap<String, f64>,
}

impl FactualityReport {
    /// Mean of the per-database averages.
    pub fn overall(&self) -> f64 {
        if self.per_database.is_empty() {
            0.0
        } else {
            self.per_database.values().sum::<f64>() / self.per_database.len() as f64
        }
    }
}

/// Scores one spec's cached rows against gold. Gold cells with an empty
/// value set are not scored; gold keys absent from the cache score 0.
pub fn score_spec(
    spec: &VirtualTableSpec,
    cache: &BTreeMap<KeyTuple, Vec<String>>,
    gold: &GoldSpec,
) -> Result<SpecFactuality> {
    let gold_rows = gold.lookup();
    if let Some(key) = cache.keys().find(|k| !gold_rows.contains_key(k)) {
        return Err(Error::GoldMissingKey {
            spec: spec.name.clone(),
            key: key.to_string(),
        });
    }
    let positions: Vec<usize> = spec
        .gen_attrs
        .iter()
        .map(|a| {
            gold.attributes.iter().position(|g| g == &a.name).ok_or_else(|| {
                Error::Data(format!("gold store for `{}` lacks attribute `{}`", spec.name, a.name))
            })
        })
        .collect::<Result<_>>()?;
    let mut out = SpecFactuality {
        database: spec.database.clone(),
        cells: 0,
        f1_sum: 0.0,
        missing_rows: 0,
    };
    for (key, values) in &gold_rows {
        let cached = cache.get(*key);
        if cached.is_none() {
            out.missing_rows += 1;
        }
        for (i, attr) in spec.gen_attrs.iter().enumerate() {
            let gold_set: BTreeSet<String> = values[positions[i]].iter().cloned().collect();
            if gold_set.is_empty() {
                continue;
            }
            out.cells += 1;
            if let Some(row) = cached {
                out.f1_sum += cell_f1(&row[i], &gold_set, attr.cardinality);
            }
        }
    }
    Ok(out)
}

/// Scores every spec against the cache tables in its database and averages
/// all cells of a database uniformly.
pub fn factuality_report<'a>(
    specs: impl IntoIterator<Item = (&'a VirtualTableSpec, &'a DatabaseHandle)>,
    gold: &GoldValueStore,
) -> Result<FactualityReport> {
    let mut report = FactualityReport::default();
    for (spec, db) in specs {
        let gold_spec = gold
            .spec(&spec.name)
            .ok_or_else(|| Error::Data(format!("gold store has no entry for `{}`", spec.name)))?;
        let cache = read_cache(spec, db)?;
        report.per_spec.insert(spec.name.clone(), score_spec(spec, &cache, gold_spec)?);
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in report.per_spec.values() {
        let e = sums.entry(s.database.clone()).or_default();
        e.0 += s.f1_sum;
        e.1 += s.cells;
    }
    report.per_database = sums
        .into_iter()
        .map(|(db, (sum, cells))| (db, if cells == 0 { 0.0 } else { sum / cells as f64 }))
        .collect();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub database: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub diagnostic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionAccuracy {
    pub overall: f64,
    pub per_database: BTreeMap<String, f64>,
}

fn percentage(passed: usize, total: usize) -> f64 {
    (passed as f64 * 1000.0 / total as f64).round() / 10.0
}

/// Share of passing cases as a percentage with one decimal.
pub fn execution_accuracy(cases: &[CaseResult]) -> Result<ExecutionAccuracy> {
    if cases.is_empty() {
        return Err(Error::NoCases("execution accuracy"));
    }
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for c in cases {
        let e = per.entry(c.database.clone()).or_default();
        e.0 += usize::from(c.passed);
        e.1 += 1;
    }
    let passed = cases.iter().filter(|c| c.passed).count();
    Ok(ExecutionAccuracy {
        overall: percentage(passed, cases.len()),
        per_database: per.into_iter().map(|(db, (p, n))| (db, percentage(p, n))).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    /// Every request had provider-reported counts.
    Reported,
    /// No request had reported counts.
    Estimated,
    /// Some did; reported counts are used where present.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub source: TokenSource,
    pub requests: usize,
    pub cases: usize,
    pub input_total: u64,
    pub output_total: u64,
    pub input_per_query: f64,
    pub output_per_query: f64,
    pub estimated_input_total: u64,
    pub estimated_output_total: u64,
}

/// Totals over `records`, preferring reported counts, divided by `cases`.
pub fn cost_report(records: &[UsageRecord], cases: usize) -> Result<TokenReport> {
    if cases == 0 {
        return Err(Error::NoCases("cost report"));
    }
    let mut report = TokenReport {
        source: TokenSource::Estimated,
        requests: records.len(),
        cases,
        input_total: 0,
        output_total: 0,
        input_per_query: 0.0,
        output_per_query: 0.0,
        estimated_input_total: 0,
        estimated_output_total: 0,
    };
    let mut reported = 0;
    for r in records {
        report.estimated_input_total += r.input_tokens_estimated;
        report.estimated_output_total += r.output_tokens_estimated;
        report.input_total += r.input_tokens_reported.unwrap_or(r.input_tokens_estimated);
        report.output_total += r.output_tokens_reported.unwrap_or(r.output_tokens_estimated);
        if r.input_tokens_reported.is_some() && r.output_tokens_reported.is_some() {
            reported += 1;
        }
    }
    report.source = match reported {
        0 => TokenSource::Estimated,
        n if n == records.len() => TokenSource::Reported,
        _ => TokenSource::Mixed,
    };
    report.input_per_query = report.input_total as f64 / cases as f64;
    report.output_per_query = report.output_total as f64 / cases as f64;
    Ok(report)
}

/// Settings a run was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub provider_mode: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub k: usize,
    pub plan_mode: String,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    /// Wall-clock creation time; the only field that differs between
    /// otherwise identical runs.
    pub generated_at: String,
    pub suite: String,
    pub settings: RunSettings,
    pub ex_overall: f64,
    pub ex_per_database: BTreeMap<String, f64>,
    pub f1_overall: f64,
    pub f1_per_database: BTreeMap<String, f64>,
    pub f1_per_spec: BTreeMap<String, f64>,
    pub tokens: TokenReport,
    pub per_case: Vec<CaseResult>,
}

impl MetricsReport {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str, source: &str) -> Result<Self> {
        let report: MetricsReport = serde_json::from_str(text).map_err(|e| Error::config(source, e))?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::config(source, format!("unsupported format_version {}", report.format_version)));
        }
        Ok(report)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    /// The report with its timestamp blanked, for reproducibility checks.
    pub fn without_timestamp(&self) -> MetricsReport {
        MetricsReport {
            generated_at: String::new(),
            ..self.clone()
        }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let s = &self.settings;
        let _ = writeln!(out, "suite {}  ({} cases)", self.suite, self.per_case.len());
        let _ = writeln!(
            out,
            "provider {} model {}  k={}  mode={}  temperature={}  max_tokens={}",
            s.provider_mode, s.model_id, s.k, s.plan_mode, s.temperature, s.max_output_tokens
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24} {:>8} {:>8}", "database", "EX %", "F1");
        let dbs: BTreeSet<&String> = self.ex_per_database.keys().chain(self.f1_per_database.keys()).collect();
        for db in dbs {
            let ex = self.ex_per_database.get(db).map_or("-".into(), |v| format!("{v:.1}"));
            let f1 = self.f1_per_database.get(db).map_or("-".into(), |v| format!("{v:.3}"));
            let _ = writeln!(out, "{db:<24} {ex:>8} {f1:>8}");
        }
        let _ = writeln!(out, "{:<24} {:>8.1} {:>8.3}", "overall", self.ex_overall, self.f1_overall);
        let _ = writeln!(out);
        for (spec, f1) in &self.f1_per_spec {
            let _ = writeln!(out, "F1 {spec:<21} {f1:.3}");
        }
        let t = &self.tokens;
        let _ = writeln!(
            out,
            "tokens ({:?}): {} in / {} out over {} requests; per query {:.1} in / {:.1} out",
            t.source, t.input_total, t.output_total, t.requests, t.input_per_query, t.output_per_query
        );
        let _ = writeln!(out);
        for c in &self.per_case {
            let mark = if c.passed { "pass" } else { "FAIL" };
            if c.diagnostic.is_empty() {
                let _ = writeln!(out, "{mark} {}", c.id);
            } else {
                let _ = writeln!(out, "{mark} {}  {}", c.id, c.diagnostic);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{AttributeSpec, KeyAttr, ValueDomain};
    use proptest::prelude::*;

    fn set(values: &[&str]) -> BTreeSet<String> {
        values.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn f1_oracles() {
        assert_eq!(cell_f1("Agility, Super Strength", &set(&["Agility", "Super Speed"]), Cardinality::Many), 0.5);
        assert_eq!(cell_f1("Marvel Comics", &set(&["Marvel Comics"]), Cardinality::One), 1.0);
        assert_eq!(cell_f1(" Marvel Comics ", &set(&["Marvel Comics"]), Cardinality::One), 1.0);
        assert_eq!(cell_f1("marvel comics", &set(&["Marvel Comics"]), Cardinality::One), 0.0);
        assert_eq!(cell_f1("", &set(&["Flight"]), Cardinality::Many), 0.0);
        assert_eq!(cell_f1("", &set(&["Flight"]), Cardinality::One), 0.0);
        assert_eq!(cell_f1("Agility,Super Strength,Super Speed", &set(&["Agility", "Super Strength", "Super Speed"]), Cardinality::Many), 1.0);
    }

    #[test]
    fn ex_rounding_and_errors() {
        let cases: Vec<CaseResult> = (0..120)
            .map(|i| CaseResult {
                id: format!("c{i}"),
                database: if i % 2 == 0 { "a".into() } else { "b".into() },
                passed: i < 48,
                diagnostic: String::new(),
            })
            .collect();
        let ex = execution_accuracy(&cases).unwrap();
        assert_eq!(ex.overall, 40.0);
        assert_eq!(ex.per_database["a"], 40.0);
        assert!(matches!(execution_accuracy(&[]), Err(Error::NoCases(_))));
        let third: Vec<CaseResult> = cases[..3].iter().cloned().map(|mut c| { c.passed = c.id == "c0"; c }).collect();
        assert_eq!(execution_accuracy(&third).unwrap().overall, 33.3);
    }

    fn usage(i: u64, o: u64, reported: bool) -> UsageRecord {
        UsageRecord {
            spec: "s".into(),
            prompt_hash: "h".into(),
            input_tokens_estimated: i + 1,
            output_tokens_estimated: o + 1,
            input_tokens_reported: reported.then_some(i),
            output_tokens_reported: reported.then_some(o),
        }
    }

    #[test]
    fn cost_arithmetic() {
        let r = cost_report(&[usage(10, 4, true)], 1).unwrap();
        assert_eq!((r.input_per_query, r.output_per_query), (10.0, 4.0));
        assert_eq!(r.source, TokenSource::Reported);
        assert_eq!(r.estimated_input_total, 11);
        let r = cost_report(&[usage(10, 4, true), usage(10, 4, false)], 2).unwrap();
        assert_eq!(r.source, TokenSource::Mixed);
        assert_eq!(r.input_total, 21);
        assert!(matches!(cost_report(&[], 0), Err(Error::NoCases(_))));
    }

    fn one_spec(n: usize) -> (VirtualTableSpec, GoldSpec) {
        let spec = VirtualTableSpec {
            name: "p".into(),
            database: "d".into(),
            base_table: "t".into(),
            task_instruction: "x".into(),
            key_attrs: vec![KeyAttr { name: "k".into(), semantic_type: "text".into() }],
            gen_attrs: vec![AttributeSpec { name: "v".into(), domain: ValueDomain::Free, cardinality: Cardinality::One }],
            fewshot_pool: vec![],
        };
        let gold = GoldSpec {
            database: "d".into(),
            attributes: vec!["v".into()],
            rows: (0..n).map(|i| GoldRow { key: KeyTuple::new([format!("k{i}")]), values: vec![vec![format!("v{i}")]] }).collect(),
        };
        (spec, gold)
    }

    #[test]
    fn scoring_edges() {
        let (spec, gold) = one_spec(4);
        let perfect: BTreeMap<KeyTuple, Vec<String>> = gold.rows.iter().map(|r| (r.key.clone(), r.values[0].clone())).collect();
        assert_eq!(score_spec(&spec, &perfect, &gold).unwrap().f1(), 1.0);
        let empty = score_spec(&spec, &BTreeMap::new(), &gold).unwrap();
        assert_eq!((empty.f1(), empty.missing_rows), (0.0, 4));
        let mut extra = perfect.clone();
        extra.insert(KeyTuple::new(["ghost"]), vec!["x".into()]);
        assert!(matches!(score_spec(&spec, &extra, &gold), Err(Error::GoldMissingKey { .. })));
    }

    #[test]
    fn gold_store_round_trip_and_checks() {
        let (_, gold) = one_spec(3);
        let mut store = GoldValueStore::default();
        store.specs.insert("p".into(), gold);
        let json = store.to_json_string();
        assert_eq!(GoldValueStore::from_json_str(&json, "mem").unwrap(), store);
        let mut dup = store.clone();
        let row = dup.specs.get_mut("p").unwrap().rows[0].clone();
        dup.specs.get_mut("p").unwrap().rows.push(row);
        assert!(GoldValueStore::from_json_str(&serde_json::to_string(&dup).unwrap(), "mem").is_err());
    }

    proptest! {
        #[test]
        fn many_f1_symmetric_for_equal_sizes(a in prop::collection::btree_set("[a-e]", 1..5), b in prop::collection::btree_set("[a-e]", 1..5)) {
            prop_assume!(a.len() == b.len());
            let ja = a.iter().cloned().collect::<Vec<_>>().join(", ");
            let jb = b.iter().cloned().collect::<Vec<_>>().join(", ");
            let ab = cell_f1(&ja, &b, Cardinality::Many);
            let ba = cell_f1(&jb, &a, Cardinality::Many);
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn correcting_a_cell_is_monotone(n in 1usize..12, wrong in prop::collection::btree_set(0usize..12, 0..12), fix in 0usize..12) {
            let (spec, gold) = one_spec(n);
            let cache_with = |bad: &BTreeSet<usize>| -> BTreeMap<KeyTuple, Vec<String>> {
                gold.rows.iter().enumerate().map(|(i, r)| {
                    let v = if bad.contains(&i) { "wrong".to_string() } else { r.values[0][0].clone() };
                    (r.key.clone(), vec![v])
                }).collect()
            };
            let before = score_spec(&spec, &cache_with(&wrong), &gold).unwrap().f1();
            let mut fixed = wrong.clone();
            fixed.remove(&fix);
            let after = score_spec(&spec, &cache_with(&fixed), &gold).unwrap().f1();
            prop_assert!(after >= before);
            let m = wrong.iter().filter(|&&i| i < n).count();
            prop_assert!((before - (n - m) as f64 / n as f64).abs() < 1e-12);
        }
    }
}
