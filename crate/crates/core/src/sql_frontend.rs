//! Parsing of hybrid SQL and the rewrites applied before execution.
//!
//! A hybrid query is an ordinary single `SELECT` in which some relations name
//! virtual tables from the catalog. Parsing classifies every relation,
//! splits the `WHERE` and `ON` clauses into conjuncts, and remembers where
//! each relation name sits in the source text so that the rewrite to cache
//! tables can leave every other byte untouched.

use std::collections::BTreeSet;
use std::ops::{ControlFlow, Range};

use sqlparser::ast::{
    visit_expressions, BinaryOperator, Expr, JoinConstraint, JoinOperator, LimitClause,
    ObjectNamePart, SetExpr, Statement, TableFactor, Value,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use sqlparser::tokenizer::Location;

use crate::catalog::{cache_table_name, Catalog, DatabaseHandle, VirtualTableSpec};
use crate::error::{Error, Result};

/// Provenance columns present on every cache table besides the spec columns.
pub const PROVENANCE_COLUMNS: [&str; 4] = ["model_id", "prompt_hash", "created_at", "k"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationKind {
    Base,
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    /// Name as written in the query.
    pub name: String,
    /// Canonical base table name, or the spec name for virtual relations.
    pub table: String,
    pub kind: RelationKind,
    pub alias: Option<String>,
    columns: Vec<String>,
    name_span: Range<usize>,
}

impl Relation {
    /// The name other clauses use to qualify this relation's columns.
    pub fn reference_name(&self) -> &str {
        self.alias.as_deref().unwrap_or(&self.name)
    }

    pub fn has_column(&self, column: &str) -> bool {
        self.columns.iter().any(|c| c.eq_ignore_ascii_case(column))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ColumnRef {
    pub relation: usize,
    pub column: String,
}

/// `left = right` between columns of two different relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinEquality {
    pub left: ColumnRef,
    pub right: ColumnRef,
}

impl JoinEquality {
    fn links(&self, a: usize, a_col: &str, b: usize, b_col: &str) -> bool {
        let side = |c: &ColumnRef, rel: usize, col: &str| c.relation == rel && c.column.eq_ignore_ascii_case(col);
        (side(&self.left, a, a_col) && side(&self.right, b, b_col))
            || (side(&self.left, b, b_col) && side(&self.right, a, a_col))
    }
}

/// One conjunct of the `WHERE` clause or of an `ON` clause.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Filter {
    pub sql: String,
    /// Indices into `HybridQueryAst::relations`.
    pub relations: BTreeSet<usize>,
    /// Every attributed column reference.
    pub columns: BTreeSet<ColumnRef>,
    /// False when some column could not be attributed to exactly one relation.
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridQueryAst {
    pub original_sql: String,
    pub database: String,
    pub relations: Vec<Relation>,
    pub join_conditions: Vec<JoinEquality>,
    pub filters: Vec<Filter>,
    pub has_order_by: bool,
    pub limit: Option<u64>,
}

impl HybridQueryAst {
    pub fn virtual_relations(&self) -> impl Iterator<Item = (usize, &Relation)> {
        self.relations
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind == RelationKind::Virtual)
    }

    /// Distinct spec names referenced, in first-appearance order.
    pub fn virtual_specs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, r) in self.virtual_relations() {
            if !out.contains(&r.table) {
                out.push(r.table.clone());
            }
        }
        out
    }
}

fn parse_single(sql: &str) -> Result<Statement> {
    let mut statements =
        Parser::parse_sql(&SQLiteDialect {}, sql).map_err(|e| Error::SqlSyntax(e.to_string()))?;
    match statements.len() {
        1 => Ok(statements.remove(0)),
        0 => Err(Error::SqlSyntax("empty statement".into())),
        n => Err(Error::UnsupportedSql(format!("expected one statement, found {n}"))),
    }
}

/// Whether the statement has a top-level `ORDER BY`. Unparseable text is
/// treated as unordered.
pub fn has_top_level_order_by(sql: &str) -> bool {
    matches!(parse_single(sql), Ok(Statement::Query(q)) if q.order_by.is_some())
}

/// Parses a hybrid query and resolves its relations against `db` and the
/// virtual tables the catalog declares for it.
pub fn parse_hybrid(sql: &str, catalog: &Catalog, db: &DatabaseHandle) -> Result<HybridQueryAst> {
    let statement = parse_single(sql)?;
    let Statement::Query(query) = &statement else {
        return Err(Error::UnsupportedSql("only SELECT statements are supported".into()));
    };
    if query.with.is_some() {
        return Err(Error::UnsupportedSql("WITH clauses are not supported".into()));
    }
    let SetExpr::Select(select) = query.body.as_ref() else {
        return Err(Error::UnsupportedSql(
            "only a single SELECT is supported (no UNION, VALUES or nesting)".into(),
        ));
    };
    if let ControlFlow::Break(what) = visit_expressions(&statement, |e| match e {
        Expr::Subquery(_) | Expr::Exists { .. } | Expr::InSubquery { .. } => {
            ControlFlow::Break("subqueries are not supported")
        }
        _ => ControlFlow::Continue(()),
    }) {
        return Err(Error::UnsupportedSql(what.into()));
    }

    let mut relations = Vec::new();
    let mut conjuncts: Vec<&Expr> = Vec::new();
    let mut using: Vec<(usize, String)> = Vec::new();
    for twj in &select.from {
        relations.push(resolve_factor(&twj.relation, sql, catalog, db)?);
        for join in &twj.joins {
            let constraint = match &join.join_operator {
                JoinOperator::Join(c) | JoinOperator::Inner(c) | JoinOperator::CrossJoin(c) => c,
                _ => {
                    return Err(Error::UnsupportedSql(
                        "only inner joins are supported".into(),
                    ))
                }
            };
            relations.push(resolve_factor(&join.relation, sql, catalog, db)?);
            let this = relations.len() - 1;
            match constraint {
                JoinConstraint::On(expr) => split_conjuncts(expr, &mut conjuncts),
                JoinConstraint::Using(names) => {
                    for name in names {
                        if let Some(ObjectNamePart::Identifier(id)) = name.0.last() {
                            using.push((this, id.value.clone()));
                        }
                    }
                }
                JoinConstraint::None => {}
                JoinConstraint::Natural => {
                    return Err(Error::UnsupportedSql("NATURAL joins are not supported".into()))
                }
            }
        }
    }
    if let Some(selection) = &select.selection {
        split_conjuncts(selection, &mut conjuncts);
    }

    let mut join_conditions = Vec::new();
    for (rel, column) in using {
        let earlier: Vec<usize> = (0..rel).filter(|&i| relations[i].has_column(&column)).collect();
        if let [other] = earlier[..] {
            join_conditions.push(JoinEquality {
                left: ColumnRef { relation: other, column: column.clone() },
                right: ColumnRef { relation: rel, column },
            });
        }
    }
    let mut filters = Vec::new();
    for expr in conjuncts {
        if let Expr::BinaryOp { left, op: BinaryOperator::Eq, right } = strip_nested(expr) {
            if let (Some(Some(l)), Some(Some(r))) =
                (column_of(left, &relations), column_of(right, &relations))
            {
                if l.relation != r.relation {
                    join_conditions.push(JoinEquality { left: l, right: r });
                    continue;
                }
            }
        }
        filters.push(annotate(expr, &relations));
    }

    let limit = query.limit_clause.as_ref().and_then(|lc| match lc {
        LimitClause::LimitOffset { limit: Some(e), .. } | LimitClause::OffsetCommaLimit { limit: e, .. } => {
            literal_u64(e)
        }
        _ => None,
    });

    Ok(HybridQueryAst {
        original_sql: sql.to_string(),
        database: db.id.clone(),
        relations,
        join_conditions,
        filters,
        has_order_by: query.order_by.is_some(),
        limit,
    })
}

fn literal_u64(e: &Expr) -> Option<u64> {
    match e {
        Expr::Value(v) => match &v.value {
            Value::Number(n, _) => n.parse().ok(),
            _ => None,
        },
        _ => None,
    }
}

fn strip_nested(mut e: &Expr) -> &Expr {
    while let Expr::Nested(inner) = e {
        e = inner;
    }
    e
}

fn split_conjuncts<'a>(expr: &'a Expr, out: &mut Vec<&'a Expr>) {
    match strip_nested(expr) {
        Expr::BinaryOp { left, op: BinaryOperator::And, right } => {
            split_conjuncts(left, out);
            split_conjuncts(right, out);
        }
        _ => out.push(expr),
    }
}

/// `None` if `e` is not a column reference, `Some(None)` if it is one that
/// cannot be attributed to a single relation.
fn column_of(e: &Expr, relations: &[Relation]) -> Option<Option<ColumnRef>> {
    match strip_nested(e) {
        Expr::Identifier(id) => {
            let owners: Vec<usize> = relations
                .iter()
                .enumerate()
                .filter(|(_, r)| r.has_column(&id.value))
                .map(|(i, _)| i)
                .collect();
            Some(match owners[..] {
                [only] => Some(ColumnRef { relation: only, column: id.value.clone() }),
                _ => None,
            })
        }
        Expr::CompoundIdentifier(parts) if parts.len() == 2 => {
            let (qualifier, column) = (&parts[0].value, &parts[1].value);
            Some(
                relations
                    .iter()
                    .position(|r| r.reference_name().eq_ignore_ascii_case(qualifier))
                    .map(|relation| ColumnRef { relation, column: column.clone() }),
            )
        }
        Expr::CompoundIdentifier(_) => Some(None),
        _ => None,
    }
}

fn annotate(expr: &Expr, relations: &[Relation]) -> Filter {
    let mut refs = BTreeSet::new();
    let mut columns = BTreeSet::new();
    let mut resolved = true;
    let _ = visit_expressions(expr, |e| {
        match column_of(e, relations) {
            Some(Some(c)) => {
                refs.insert(c.relation);
                columns.insert(c);
            }
            Some(None) => resolved = false,
            None => {}
        }
        ControlFlow::<()>::Continue(())
    });
    Filter { sql: expr.to_string(), relations: refs, columns, resolved }
}

fn resolve_factor(
    factor: &TableFactor,
    sql: &str,
    catalog: &Catalog,
    db: &DatabaseHandle,
) -> Result<Relation> {
    let TableFactor::Table { name, alias, args, .. } = factor else {
        return Err(Error::UnsupportedSql(
            "only named tables may appear in FROM/JOIN".into(),
        ));
    };
    if args.is_some() {
        return Err(Error::UnsupportedSql("table functions are not supported".into()));
    }
    let ident = match &name.0[..] {
        [ObjectNamePart::Identifier(id)] => id,
        _ => return Err(Error::UnsupportedSql(format!("qualified table name `{name}`"))),
    };
    let name_span = span_to_bytes(sql, ident.span.start, ident.span.end)
        .ok_or_else(|| Error::SqlSyntax(format!("cannot locate `{}` in the query text", ident.value)))?;
    let written = ident.value.clone();
    let alias = alias.as_ref().map(|a| a.name.value.clone());

    if let Some(spec) = catalog.spec(&written).filter(|s| s.database == db.id) {
        return Ok(Relation {
            name: written,
            table: spec.name.clone(),
            kind: RelationKind::Virtual,
            alias,
            columns: spec.columns(),
            name_span,
        });
    }
    if let Some((table, cols)) = db.table(&written) {
        return Ok(Relation {
            name: written,
            table: table.to_string(),
            kind: RelationKind::Base,
            alias,
            columns: cols.iter().map(|c| c.name.clone()).collect(),
            name_span,
        });
    }
    if let Some(spec) = catalog.spec_for_cache(&written).filter(|s| s.database == db.id) {
        let mut columns = spec.columns();
        columns.extend(PROVENANCE_COLUMNS.iter().map(|c| c.to_string()));
        return Ok(Relation {
            name: written,
            table: spec.cache_table(),
            kind: RelationKind::Base,
            alias,
            columns,
            name_span,
        });
    }
    Err(Error::UnresolvedRelation(written))
}

/// Converts sqlparser's 1-based line/column (counted in chars) to byte offsets.
fn span_to_bytes(sql: &str, start: Location, end: Location) -> Option<Range<usize>> {
    if start.line == 0 {
        return None;
    }
    let (mut line, mut col) = (1u64, 1u64);
    let (mut from, mut to) = (None, None);
    for (offset, ch) in sql.char_indices() {
        if line == start.line && col == start.column {
            from = Some(offset);
        }
        if line == end.line && col == end.column {
            to = Some(offset);
        }
        if ch == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    if line == end.line && col == end.column {
        to = Some(sql.len());
    }
    Some(from?..to?)
}

/// Replaces every virtual relation with its cache table.
///
/// A relation without an alias keeps its written name as the alias, so
/// qualified column references elsewhere in the query stay valid. Queries
/// without virtual relations come back byte-identical.
pub fn rewrite_to_cache(ast: &HybridQueryAst) -> String {
    let mut virtuals: Vec<&Relation> = ast.virtual_relations().map(|(_, r)| r).collect();
    virtuals.sort_by_key(|r| std::cmp::Reverse(r.name_span.start));
    let mut sql = ast.original_sql.clone();
    for rel in virtuals {
        let written = &ast.original_sql[rel.name_span.clone()];
        let replacement = match rel.alias {
            Some(_) => cache_table_name(&rel.table),
            None => format!("{} AS {written}", cache_table_name(&rel.table)),
        };
        sql.replace_range(rel.name_span.clone(), &replacement);
    }
    sql
}

/// A predicate usable to restrict a virtual table's keys before generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PushablePredicate {
    pub sql: String,
}

/// Key restriction derived for one occurrence of a virtual table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestrictionBranch {
    /// Name the base table is aliased as when the predicates run: a base
    /// relation whose key columns are equated with the virtual relation's,
    /// or the virtual relation itself when the predicates only touch its
    /// key columns.
    pub anchor: Option<String>,
    pub predicates: Vec<PushablePredicate>,
}

/// Restrictions for every occurrence of one spec in a query. The keys that
/// must be generated are the union over branches.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeyRestriction {
    pub branches: Vec<RestrictionBranch>,
}

impl KeyRestriction {
    /// True when some occurrence needs every key of the base table.
    pub fn is_unrestricted(&self) -> bool {
        self.branches.is_empty() || self.branches.iter().any(|b| b.predicates.is_empty())
    }

    pub fn predicates(&self) -> impl Iterator<Item = &PushablePredicate> {
        self.branches.iter().flat_map(|b| b.predicates.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.predicates().next().is_none()
    }
}

/// Collects the filters that restrict which keys of `spec` a query can use.
///
/// A filter qualifies if it references nothing but a base relation over the
/// spec's base table whose every key column is equated with the virtual
/// relation's key column of the same name, or nothing but the virtual
/// relation's own key columns. The first kind wins when both exist. Anything
/// else is left for execution and the occurrence falls back to all keys.
pub fn extract_pushdown_predicates(ast: &HybridQueryAst, spec: &VirtualTableSpec) -> KeyRestriction {
    let only = |f: &Filter, rel: usize| f.resolved && f.relations.len() == 1 && f.relations.contains(&rel);
    let mut branches = Vec::new();
    for (v, rel) in ast.virtual_relations() {
        if !rel.table.eq_ignore_ascii_case(&spec.name) {
            continue;
        }
        let anchor = ast.relations.iter().enumerate().position(|(b, base)| {
            base.kind == RelationKind::Base
                && base.table.eq_ignore_ascii_case(&spec.base_table)
                && spec.key_names().all(|k| {
                    ast.join_conditions.iter().any(|j| j.links(v, k, b, k))
                })
        });
        let on_anchor: Vec<PushablePredicate> = match anchor {
            Some(b) => ast
                .filters
                .iter()
                .filter(|f| only(f, b))
                .map(|f| PushablePredicate { sql: f.sql.clone() })
                .collect(),
            None => vec![],
        };
        let branch = if !on_anchor.is_empty() {
            RestrictionBranch { anchor: Some(ast.relations[anchor.unwrap()].reference_name().to_string()), predicates: on_anchor }
        } else {
            let own: Vec<PushablePredicate> = ast
                .filters
                .iter()
                .filter(|f| {
                    only(f, v) && !f.columns.is_empty() && f.columns.iter().all(|c| spec.key_names().any(|k| k.eq_ignore_ascii_case(&c.column)))
                })
                .map(|f| PushablePredicate { sql: f.sql.clone() })
                .collect();
            RestrictionBranch { anchor: Some(rel.reference_name().to_string()), predicates: own }
        };
        branches.push(branch);
    }
    KeyRestriction { branches }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{AttributeSpec, Cardinality, KeyAttr, ValueDomain};
    use rusqlite::Connection;

    fn spec(name: &str, gen: &str) -> VirtualTableSpec {
        VirtualTableSpec {
            name: name.into(),
            database: "hero".into(),
            base_table: "superhero".into(),
            task_instruction: "x".into(),
            key_attrs: ["superhero_name", "full_name"]
                .iter()
                .map(|k| KeyAttr { name: k.to_string(), semantic_type: "text".into() })
                .collect(),
            gen_attrs: vec![AttributeSpec {
                name: gen.into(),
                domain: ValueDomain::Free,
                cardinality: Cardinality::One,
            }],
            fewshot_pool: vec![],
        }
    }

    fn fixture() -> (tempfile::TempDir, Catalog) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hero.db");
        Connection::open(&path)
            .unwrap()
            .execute_batch(
                "CREATE TABLE superhero(id INTEGER PRIMARY KEY, superhero_name TEXT, full_name TEXT, height_cm INT);
                 CREATE TABLE colour(id INTEGER PRIMARY KEY, colour TEXT);",
            )
            .unwrap();
        let mut c = Catalog::new();
        c.add_database(DatabaseHandle::open("hero", &path).unwrap()).unwrap();
        c.add_spec(spec("llm", "publisher")).unwrap();
        c.add_spec(spec("powers", "power")).unwrap();
        (dir, c)
    }

    const MARVEL: &str = "SELECT superhero.superhero_name, superhero.full_name FROM llm \
        JOIN superhero ON llm.superhero_name = superhero.superhero_name \
        AND llm.full_name = superhero.full_name WHERE llm.publisher = 'Marvel'";

    fn parse(sql: &str) -> Result<HybridQueryAst> {
        let (_d, c) = fixture();
        parse_hybrid(sql, &c, c.database("hero").unwrap())
    }

    #[test]
    fn classifies_virtual_and_base() {
        let ast = parse(MARVEL).unwrap();
        let kinds: Vec<_> = ast.relations.iter().map(|r| (r.name.as_str(), r.kind)).collect();
        assert_eq!(kinds, [("llm", RelationKind::Virtual), ("superhero", RelationKind::Base)]);
        assert_eq!(ast.join_conditions.len(), 2);
        assert_eq!(ast.filters.len(), 1);
        assert_eq!(ast.filters[0].relations, BTreeSet::from([0]));
        assert!(!ast.has_order_by);
        assert_eq!(ast.limit, None);
    }

    #[test]
    fn plain_query_has_no_virtuals() {
        let ast = parse("SELECT * FROM superhero ORDER BY height_cm LIMIT 3").unwrap();
        assert_eq!(ast.virtual_relations().count(), 0);
        assert!(ast.has_order_by);
        assert_eq!(ast.limit, Some(3));
    }

    #[test]
    fn unknown_relation() {
        assert!(matches!(parse("SELECT * FROM ghost_table"), Err(Error::UnresolvedRelation(n)) if n == "ghost_table"));
    }

    #[test]
    fn rejected_shapes() {
        assert!(matches!(parse("SELEC 1"), Err(Error::SqlSyntax(_))));
        assert!(matches!(parse("DELETE FROM superhero"), Err(Error::UnsupportedSql(_))));
        assert!(matches!(
            parse("SELECT * FROM llm LEFT JOIN superhero ON llm.full_name = superhero.full_name"),
            Err(Error::UnsupportedSql(_))
        ));
        assert!(matches!(
            parse("SELECT * FROM superhero WHERE id IN (SELECT id FROM colour)"),
            Err(Error::UnsupportedSql(_))
        ));
        assert!(matches!(parse("SELECT 1 UNION SELECT 2"), Err(Error::UnsupportedSql(_))));
    }

    #[test]
    fn rewrite_replaces_virtual_name() {
        let ast = parse(MARVEL).unwrap();
        let expected = MARVEL.replacen("FROM llm ", "FROM llm_cache_llm AS llm ", 1);
        assert_eq!(rewrite_to_cache(&ast), expected);
    }

    #[test]
    fn rewrite_keeps_alias() {
        let sql = "SELECT l.publisher FROM llm AS l JOIN superhero s ON l.full_name = s.full_name";
        let ast = parse(sql).unwrap();
        assert_eq!(
            rewrite_to_cache(&ast),
            "SELECT l.publisher FROM llm_cache_llm AS l JOIN superhero s ON l.full_name = s.full_name"
        );
    }

    #[test]
    fn rewrite_identity_without_virtuals() {
        let sql = "SELECT  *\nFROM superhero   WHERE height_cm > 1";
        assert_eq!(rewrite_to_cache(&parse(sql).unwrap()), sql);
    }

    #[test]
    fn rewrite_two_virtuals_then_reparse() {
        let (_d, c) = fixture();
        let db = c.database("hero").unwrap();
        let sql = "SELECT s.superhero_name FROM superhero s\n  JOIN llm ON llm.full_name = s.full_name\n  JOIN \"powers\" p ON p.full_name = s.full_name";
        let ast = parse_hybrid(sql, &c, db).unwrap();
        let rewritten = rewrite_to_cache(&ast);
        let again = parse_hybrid(&rewritten, &c, db).unwrap();
        let names: Vec<(&str, RelationKind)> =
            again.relations.iter().map(|r| (r.table.as_str(), r.kind)).collect();
        assert_eq!(
            names,
            [
                ("superhero", RelationKind::Base),
                ("llm_cache_llm", RelationKind::Base),
                ("llm_cache_powers", RelationKind::Base)
            ]
        );
        // Idempotent.
        assert_eq!(rewrite_to_cache(&again), rewritten);
    }

    #[test]
    fn spans_survive_multibyte_text() {
        let sql = "SELECT 'é漢' AS x, l.publisher FROM llm l JOIN superhero s ON l.full_name = s.full_name WHERE s.superhero_name = 'Ünï'";
        let out = rewrite_to_cache(&parse(sql).unwrap());
        assert_eq!(out, sql.replace("FROM llm l", "FROM llm_cache_llm l"));
    }

    #[test]
    fn pushdown_on_base_key_filter() {
        let sql = format!("{MARVEL} AND superhero.superhero_name = 'Spider-Man'");
        let ast = parse(&sql).unwrap();
        let r = extract_pushdown_predicates(&ast, &spec("llm", "publisher"));
        let preds: Vec<&str> = r.predicates().map(|p| p.sql.as_str()).collect();
        assert_eq!(preds, ["superhero.superhero_name = 'Spider-Man'"]);
        assert!(!r.is_unrestricted());
        assert_eq!(r.branches[0].anchor.as_deref(), Some("superhero"));
    }

    #[test]
    fn generated_attribute_filter_not_pushable() {
        let ast = parse(MARVEL).unwrap();
        let r = extract_pushdown_predicates(&ast, &spec("llm", "publisher"));
        assert!(r.is_empty());
        assert!(r.is_unrestricted());
    }

    #[test]
    fn no_where_clause() {
        let ast = parse("SELECT * FROM llm JOIN superhero ON llm.superhero_name = superhero.superhero_name AND llm.full_name = superhero.full_name").unwrap();
        let r = extract_pushdown_predicates(&ast, &spec("llm", "publisher"));
        assert!(r.is_empty() && r.is_unrestricted());
    }

    #[test]
    fn partial_key_join_falls_back() {
        let ast = parse(
            "SELECT * FROM llm JOIN superhero ON llm.full_name = superhero.full_name WHERE superhero.height_cm > 190",
        )
        .unwrap();
        let r = extract_pushdown_predicates(&ast, &spec("llm", "publisher"));
        assert_eq!(r.branches, [RestrictionBranch { anchor: Some("llm".into()), predicates: vec![] }]);
        assert!(r.is_unrestricted());
    }

    #[test]
    fn own_key_filter_is_pushable() {
        let ast = parse("SELECT l.publisher FROM llm l WHERE l.superhero_name = 'Hulk' AND l.publisher <> 'x'").unwrap();
        let r = extract_pushdown_predicates(&ast, &spec("llm", "publisher"));
        assert_eq!(
            r.branches,
            [RestrictionBranch {
                anchor: Some("l".into()),
                predicates: vec![PushablePredicate { sql: "l.superhero_name = 'Hulk'".into() }]
            }]
        );
        // A filter mixing a key and a generated column stays behind.
        let ast = parse("SELECT * FROM llm WHERE superhero_name = publisher").unwrap();
        assert!(extract_pushdown_predicates(&ast, &spec("llm", "publisher")).is_unrestricted());
    }

    #[test]
    fn implicit_join_and_or_filters() {
        let ast = parse(
            "SELECT * FROM superhero s, llm WHERE llm.superhero_name = s.superhero_name \
             AND s.full_name = llm.full_name AND (s.height_cm > 200 OR s.height_cm < 150) AND llm.publisher <> 'x'",
        )
        .unwrap();
        let r = extract_pushdown_predicates(&ast, &spec("llm", "publisher"));
        let preds: Vec<&str> = r.predicates().map(|p| p.sql.as_str()).collect();
        assert_eq!(preds, ["(s.height_cm > 200 OR s.height_cm < 150)"]);
    }

    #[test]
    fn ambiguous_unqualified_column_not_pushed() {
        let ast = parse(
            "SELECT * FROM llm JOIN superhero ON llm.superhero_name = superhero.superhero_name \
             AND llm.full_name = superhero.full_name WHERE full_name = 'Peter Parker' AND height_cm = 178",
        )
        .unwrap();
        let r = extract_pushdown_predicates(&ast, &spec("llm", "publisher"));
        let preds: Vec<&str> = r.predicates().map(|p| p.sql.as_str()).collect();
        assert_eq!(preds, ["height_cm = 178"]);
    }

    #[test]
    fn using_clause_counts_as_key_join() {
        let ast = parse(
            "SELECT * FROM superhero JOIN llm USING (superhero_name, full_name) WHERE superhero.id = 4",
        )
        .unwrap();
        let r = extract_pushdown_predicates(&ast, &spec("llm", "publisher"));
        assert_eq!(r.predicates().count(), 1);
    }
}
