//! Relations, tuples, keys, and semantic type detection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::datetime::parse_iso8601;
use crate::error::{usage, Error, Result};

/// Name of the attribute injected into relations declared without a primary key.
pub const SYNTHETIC_KEY: &str = "__rowid";

/// Categorical detection: at most this many distinct values...
pub const CATEGORICAL_MAX_DISTINCT: usize = 64;
/// ...and at most this distinct/non-null ratio.
pub const CATEGORICAL_MAX_RATIO: f64 = 0.2;
/// Minimum share of ISO-8601 parseable text cells for a datetime column.
pub const DATETIME_MIN_PARSE_RATE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawType {
    Integer,
    Real,
    Text,
    Timestamp,
    Boolean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticType {
    Categorical { cardinality: usize },
    Numeric,
    Text,
    Datetime,
    Key,
    Ignored,
}

impl SemanticType {
    pub fn is_feature(&self) -> bool {
        !matches!(self, SemanticType::Key | SemanticType::Ignored)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub raw: RawType,
    pub semantic: SemanticType,
    pub nullable: bool,
}

impl AttributeDef {
    /// An attribute whose semantic type is yet to be detected.
    pub fn new(name: impl Into<String>, raw: RawType) -> Self {
        Self { name: name.into(), raw, semantic: SemanticType::Ignored, nullable: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKeyDef {
    pub source_relation: String,
    pub source_attrs: Vec<String>,
    /// Matched positionally against the target's primary key attributes.
    pub target_relation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationDef {
    pub name: String,
    pub attributes: Vec<AttributeDef>,
    pub pk_attrs: Vec<String>,
    pub fks: Vec<ForeignKeyDef>,
}

impl RelationDef {
    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn arity(&self) -> usize {
        self.attributes.len()
    }

    pub fn pk_indices(&self) -> Vec<usize> {
        self.pk_attrs.iter().filter_map(|n| self.attr_index(n)).collect()
    }

    /// Whether the attribute participates in the primary key or any foreign key.
    pub fn is_key_attr(&self, name: &str) -> bool {
        self.pk_attrs.iter().any(|a| a == name)
            || self.fks.iter().any(|fk| fk.source_attrs.iter().any(|a| a == name))
    }
}

/// A foreign key resolved to relation and column indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedFk {
    pub source: usize,
    pub source_cols: Vec<usize>,
    pub target: usize,
    pub target_cols: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDef {
    pub relations: Vec<RelationDef>,
}

impl SchemaDef {
    /// Checks the schema invariants: unique names, keys referring to existing
    /// attributes, FK arity and raw types matching the referenced primary key.
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for rel in &self.relations {
            if !names.insert(rel.name.as_str()) {
                return Err(Error::Schema(format!("duplicate relation `{}`", rel.name)));
            }
            let mut attrs = BTreeSet::new();
            for a in &rel.attributes {
                if !attrs.insert(a.name.as_str()) {
                    return Err(Error::Schema(format!(
                        "duplicate attribute `{}` in `{}`",
                        a.name, rel.name
                    )));
                }
                if let SemanticType::Categorical { cardinality: 0 } = a.semantic {
                    return Err(Error::Schema(format!(
                        "`{}.{}` is categorical with zero cardinality",
                        rel.name, a.name
                    )));
                }
            }
            for pk in &rel.pk_attrs {
                if rel.attr_index(pk).is_none() {
                    return Err(Error::Schema(format!(
                        "primary key attribute `{pk}` missing from `{}`",
                        rel.name
                    )));
                }
            }
        }
        for rel in &self.relations {
            for fk in &rel.fks {
                if fk.source_relation != rel.name {
                    return Err(Error::Schema(format!(
                        "foreign key declared on `{}` names source `{}`",
                        rel.name, fk.source_relation
                    )));
                }
                let target = self.relation(&fk.target_relation).ok_or_else(|| {
                    Error::Schema(format!(
                        "foreign key of `{}` references missing relation `{}`",
                        rel.name, fk.target_relation
                    ))
                })?;
                if target.pk_attrs.is_empty() {
                    return Err(Error::Schema(format!(
                        "foreign key of `{}` references `{}` which has no primary key",
                        rel.name, target.name
                    )));
                }
                if fk.source_attrs.len() != target.pk_attrs.len() {
                    return Err(Error::Schema(format!(
                        "foreign key {}({}) has {} attributes but `{}` has a {}-attribute primary key",
                        rel.name,
                        fk.source_attrs.join(", "),
                        fk.source_attrs.len(),
                        target.name,
                        target.pk_attrs.len()
                    )));
                }
                for (s, t) in fk.source_attrs.iter().zip(&target.pk_attrs) {
                    let si = rel.attr_index(s).ok_or_else(|| {
                        Error::Schema(format!("foreign key attribute `{s}` missing from `{}`", rel.name))
                    })?;
                    let ti = target.attr_index(t).expect("validated above");
                    if rel.attributes[si].raw != target.attributes[ti].raw {
                        return Err(Error::Schema(format!(
                            "foreign key `{}.{s}` and `{}.{t}` have different raw types",
                            rel.name, target.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn relation(&self, name: &str) -> Option<&RelationDef> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    /// All foreign keys in relation order; the position is the global FK id.
    pub fn foreign_keys(&self) -> Vec<ResolvedFk> {
        let mut out = Vec::new();
        for (ri, rel) in self.relations.iter().enumerate() {
            for fk in &rel.fks {
                let Some(ti) = self.relation_index(&fk.target_relation) else { continue };
                let target = &self.relations[ti];
                out.push(ResolvedFk {
                    source: ri,
                    source_cols: fk.source_attrs.iter().filter_map(|a| rel.attr_index(a)).collect(),
                    target: ti,
                    target_cols: target.pk_indices(),
                });
            }
        }
        out
    }
}

/// A single cell. Timestamps are UTC seconds since the Unix epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Timestamp(i64),
    Boolean(bool),
}

impl Value {
    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Boolean(_) => 1,
            Value::Integer(_) => 2,
            Value::Real(_) => 3,
            Value::Timestamp(_) => 4,
            Value::Text(_) => 5,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn conforms_to(&self, raw: RawType) -> bool {
        matches!(
            (self, raw),
            (Value::Null, _)
                | (Value::Integer(_), RawType::Integer)
                | (Value::Real(_), RawType::Real)
                | (Value::Text(_), RawType::Text)
                | (Value::Timestamp(_), RawType::Timestamp)
                | (Value::Boolean(_), RawType::Boolean)
        )
    }

    /// Numeric reading used for statistics and encoding.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(v) => Some(*v as f64),
            Value::Real(v) => Some(*v),
            Value::Timestamp(v) => Some(*v as f64),
            Value::Boolean(b) => Some(if *b { 1.0 } else { 0.0 }),
            Value::Null | Value::Text(_) => None,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Integer(a), Value::Integer(b)) => a.cmp(b),
            (Value::Real(a), Value::Real(b)) => a.total_cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Timestamp(a), Value::Timestamp(b)) => a.cmp(b),
            (Value::Boolean(a), Value::Boolean(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

pub type Row = Vec<Value>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub arity: usize,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(arity: usize, rows: Vec<Row>) -> Self {
        Self { arity, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn key_of(&self, row: usize, cols: &[usize]) -> Vec<Value> {
        cols.iter().map(|&c| self.rows[row][c].clone()).collect()
    }
}

/// A schema plus one table per relation, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Database {
    pub schema: SchemaDef,
    pub tables: Vec<Table>,
}

impl Database {
    /// Validates the schema and cell conformance, injecting a synthetic
    /// row-index primary key into every relation declared without one.
    pub fn new(mut schema: SchemaDef, mut tables: Vec<Table>) -> Result<Self> {
        if schema.relations.len() != tables.len() {
            return Err(Error::Schema(format!(
                "{} relations but {} tables",
                schema.relations.len(),
                tables.len()
            )));
        }
        for (rel, table) in schema.relations.iter_mut().zip(tables.iter_mut()) {
            if rel.pk_attrs.is_empty() {
                if rel.attr_index(SYNTHETIC_KEY).is_some() {
                    return Err(Error::Schema(format!(
                        "`{}` uses the reserved attribute name `{SYNTHETIC_KEY}`",
                        rel.name
                    )));
                }
                rel.attributes.push(AttributeDef {
                    name: SYNTHETIC_KEY.to_string(),
                    raw: RawType::Integer,
                    semantic: SemanticType::Key,
                    nullable: false,
                });
                rel.pk_attrs.push(SYNTHETIC_KEY.to_string());
                for (i, row) in table.rows.iter_mut().enumerate() {
                    row.push(Value::Integer(i as i64));
                }
                table.arity += 1;
            }
        }
        schema.validate()?;
        for (rel, table) in schema.relations.iter().zip(&tables) {
            if table.arity != rel.arity() {
                return Err(Error::Schema(format!(
                    "table `{}` has arity {} but the relation declares {}",
                    rel.name,
                    table.arity,
                    rel.arity()
                )));
            }
            for (ri, row) in table.rows.iter().enumerate() {
                if row.len() != rel.arity() {
                    return Err(Error::Schema(format!(
                        "`{}` row {ri} has {} cells, expected {}",
                        rel.name,
                        row.len(),
                        rel.arity()
                    )));
                }
                for (cell, attr) in row.iter().zip(&rel.attributes) {
                    if !cell.conforms_to(attr.raw) {
                        return Err(Error::Schema(format!(
                            "`{}` row {ri} column `{}`: {cell:?} is not {:?}",
                            rel.name, attr.name, attr.raw
                        )));
                    }
                }
            }
        }
        Ok(Self { schema, tables })
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.schema.relation_index(name).map(|i| &self.tables[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParseRates {
    pub number: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ColumnStats {
    pub row_count: usize,
    pub null_count: usize,
    pub distinct_count: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub distinct_ratio: f64,
    pub parse_rates: ParseRates,
}

pub fn compute_column_stats(table: &Table, attr_index: usize) -> Result<ColumnStats> {
    if attr_index >= table.arity {
        return Err(usage!("attribute index {attr_index} out of range for arity {}", table.arity));
    }
    let mut distinct = BTreeSet::new();
    let mut stats = ColumnStats { row_count: table.len(), ..Default::default() };
    let (mut numbers, mut stamps) = (0usize, 0usize);
    for row in &table.rows {
        let v = &row[attr_index];
        if v.is_null() {
            stats.null_count += 1;
            continue;
        }
        distinct.insert(v);
        if let Some(x) = v.as_f64() {
            stats.min = Some(stats.min.map_or(x, |m: f64| m.min(x)));
            stats.max = Some(stats.max.map_or(x, |m: f64| m.max(x)));
        }
        match v {
            Value::Integer(_) | Value::Real(_) => numbers += 1,
            Value::Timestamp(_) => stamps += 1,
            Value::Text(s) => {
                if s.trim().parse::<f64>().is_ok() {
                    numbers += 1;
                }
                if parse_iso8601(s).is_some() {
                    stamps += 1;
                }
            }
            _ => {}
        }
    }
    let non_null = stats.row_count - stats.null_count;
    stats.distinct_count = distinct.len();
    stats.distinct_ratio = stats.distinct_count as f64 / non_null.max(1) as f64;
    if non_null > 0 {
        stats.parse_rates = ParseRates {
            number: numbers as f64 / non_null as f64,
            timestamp: stamps as f64 / non_null as f64,
        };
    }
    Ok(stats)
}

/// Applies the threshold rules to one non-key column.
pub fn infer_semantic(raw: RawType, stats: &ColumnStats) -> SemanticType {
    if stats.row_count == stats.null_count {
        return SemanticType::Ignored;
    }
    if raw == RawType::Timestamp
        || (raw == RawType::Text && stats.parse_rates.timestamp >= DATETIME_MIN_PARSE_RATE)
    {
        return SemanticType::Datetime;
    }
    let small = stats.distinct_count <= CATEGORICAL_MAX_DISTINCT
        && stats.distinct_ratio <= CATEGORICAL_MAX_RATIO;
    match raw {
        RawType::Boolean => SemanticType::Categorical { cardinality: stats.distinct_count.max(1) },
        RawType::Integer | RawType::Text if small => {
            SemanticType::Categorical { cardinality: stats.distinct_count.max(1) }
        }
        RawType::Integer | RawType::Real => SemanticType::Numeric,
        _ => SemanticType::Text,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub schema: SchemaDef,
    pub warnings: Vec<String>,
}

/// Assigns a semantic type to every attribute. Key attributes become `Key`;
/// columns that cannot be typed (all null) fall back to `Ignored` with a warning.
pub fn detect_schema(db: &Database) -> Detection {
    let mut schema = db.schema.clone();
    let mut warnings = Vec::new();
    for (rel, table) in schema.relations.iter_mut().zip(&db.tables) {
        let keys: Vec<bool> = rel.attributes.iter().map(|a| rel.is_key_attr(&a.name)).collect();
        for (ai, attr) in rel.attributes.iter_mut().enumerate() {
            if keys[ai] {
                attr.semantic = SemanticType::Key;
                continue;
            }
            let stats = compute_column_stats(table, ai).expect("attribute index in range");
            attr.semantic = infer_semantic(attr.raw, &stats);
            if attr.semantic == SemanticType::Ignored {
                warnings.push(format!("`{}.{}` has no non-null values; ignored", rel.name, attr.name));
            }
        }
    }
    Detection { schema, warnings }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkViolation {
    pub relation: String,
    pub key: Vec<Value>,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FkViolation {
    pub relation: String,
    /// Global FK id, see [`SchemaDef::foreign_keys`].
    pub fk: usize,
    pub row: usize,
    pub key: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IntegrityReport {
    pub pk_violations: Vec<PkViolation>,
    pub fk_violations: Vec<FkViolation>,
}

impl IntegrityReport {
    pub fn is_empty(&self) -> bool {
        self.pk_violations.is_empty() && self.fk_violations.is_empty()
    }
}

/// Maps each primary-key value to its row. Rows whose key holds a null are skipped.
pub(crate) fn pk_index(table: &Table, pk_cols: &[usize]) -> BTreeMap<Vec<Value>, Vec<usize>> {
    let mut index: BTreeMap<Vec<Value>, Vec<usize>> = BTreeMap::new();
    for r in 0..table.len() {
        let key = table.key_of(r, pk_cols);
        if key.iter().any(Value::is_null) {
            continue;
        }
        index.entry(key).or_default().push(r);
    }
    index
}

pub fn validate_integrity(db: &Database) -> IntegrityReport {
    let mut report = IntegrityReport::default();
    let mut indices = Vec::with_capacity(db.tables.len());
    for (rel, table) in db.schema.relations.iter().zip(&db.tables) {
        let index = pk_index(table, &rel.pk_indices());
        for (key, rows) in &index {
            if rows.len() > 1 {
                report.pk_violations.push(PkViolation {
                    relation: rel.name.clone(),
                    key: key.clone(),
                    rows: rows.clone(),
                });
            }
        }
        indices.push(index);
    }
    for (fi, fk) in db.schema.foreign_keys().iter().enumerate() {
        let table = &db.tables[fk.source];
        for r in 0..table.len() {
            let key = table.key_of(r, &fk.source_cols);
            if key.iter().any(Value::is_null) {
                continue;
            }
            if !indices[fk.target].contains_key(&key) {
                report.fk_violations.push(FkViolation {
                    relation: db.schema.relations[fk.source].name.clone(),
                    fk: fi,
                    row: r,
                    key,
                });
            }
        }
    }
    report
}
