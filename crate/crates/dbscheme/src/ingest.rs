//! Dataset ingestion from a manifest directory or a SQLite file.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use dbscheme_core::datetime::{format_iso8601, parse_iso8601};
use dbscheme_core::embed::TextVectors;
use dbscheme_core::relmodel::{detect_schema, validate_integrity, Database, IntegrityReport, RawType, SemanticType, Table, Value};
use serde::{Deserialize, Serialize};

use crate::error::{csv_err, io_err, json_err, Error, Result};
use crate::manifest::{Manifest, SemanticOverride, TargetSpec, MANIFEST_FILE};

/// A typed database with detected semantic types, ready for graph building.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub db: Database,
    pub target: Option<TargetSpec>,
    pub text: Option<TextVectors>,
    pub integrity: IntegrityReport,
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Detects semantic types, applies overrides and records the integrity report.
    pub fn from_database(name: &str, db: Database, overrides: &[(String, String, SemanticOverride)], target: Option<TargetSpec>, text: Option<TextVectors>) -> Result<Self> {
        let det = detect_schema(&db);
        let mut db = Database { schema: det.schema, tables: db.tables };
        for (rel, col, o) in overrides {
            apply_override(&mut db, rel, col, *o)?;
        }
        let integrity = validate_integrity(&db);
        Ok(Self { name: name.into(), db, target, text, integrity, warnings: det.warnings })
    }

    /// One line per violation, empty when the database is consistent.
    pub fn integrity_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for v in &self.integrity.pk_violations {
            out.push(format!("duplicate primary key {:?} in `{}` rows {:?}", v.key, v.relation, v.rows));
        }
        for v in &self.integrity.fk_violations {
            out.push(format!("dangling foreign key {:?} in `{}` row {}", v.key, v.relation, v.row));
        }
        out
    }
}

fn apply_override(db: &mut Database, rel: &str, col: &str, o: SemanticOverride) -> Result<()> {
    let ri = db.schema.relation_index(rel).ok_or_else(|| Error::Manifest(format!("override for unknown relation `{rel}`")))?;
    let r = &mut db.schema.relations[ri];
    let ai = r.attr_index(col).ok_or_else(|| Error::Manifest(format!("override for unknown column `{rel}.{col}`")))?;
    if r.attributes[ai].semantic == SemanticType::Key {
        return Err(Error::Manifest(format!("`{rel}.{col}` is a key and cannot be retyped")));
    }
    r.attributes[ai].semantic = match o {
        SemanticOverride::Categorical => {
            let distinct: BTreeSet<&Value> = db.tables[ri].rows.iter().map(|row| &row[ai]).filter(|v| !v.is_null()).collect();
            SemanticType::Categorical { cardinality: distinct.len().max(1) }
        }
        SemanticOverride::Numeric => SemanticType::Numeric,
        SemanticOverride::Text => SemanticType::Text,
        SemanticOverride::Datetime => SemanticType::Datetime,
        SemanticOverride::Ignored => SemanticType::Ignored,
    };
    Ok(())
}

/// Parses one CSV cell. The empty string is null.
pub fn parse_cell(s: &str, raw: RawType) -> std::result::Result<Value, String> {
    if s.is_empty() {
        return Ok(Value::Null);
    }
    match raw {
        RawType::Integer => s.trim().parse().map(Value::Integer).map_err(|e| format!("`{s}` is not an integer: {e}")),
        RawType::Real => s.trim().parse().map(Value::Real).map_err(|e| format!("`{s}` is not a real: {e}")),
        RawType::Text => Ok(Value::Text(s.into())),
        RawType::Timestamp => parse_iso8601(s).map(Value::Timestamp).ok_or_else(|| format!("`{s}` is not an ISO-8601 timestamp")),
        RawType::Boolean => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "1" => Ok(Value::Boolean(true)),
            "false" | "0" => Ok(Value::Boolean(false)),
            _ => Err(format!("`{s}` is not a boolean")),
        },
    }
}

/// Inverse of [`parse_cell`] for values of the declared type.
pub fn format_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Integer(i) => i.to_string(),
        Value::Real(x) => format!("{x:?}"),
        Value::Text(s) => s.clone(),
        Value::Timestamp(t) => format_iso8601(*t),
        Value::Boolean(b) => b.to_string(),
    }
}

/// Loads a manifest directory, or a SQLite file when `path` is a file.
pub fn ingest_dataset(path: &Path) -> Result<Dataset> {
    if path.is_file() {
        let name = path.file_stem().map_or_else(|| "db".into(), |s| s.to_string_lossy().into_owned());
        let db = crate::sqlite::read_sqlite(path)?;
        return Dataset::from_database(&name, db, &[], None, None);
    }
    if !path.join(MANIFEST_FILE).is_file() {
        return Err(Error::Usage(format!("{} is neither a SQLite file nor a directory with {MANIFEST_FILE}", path.display())));
    }
    let manifest = Manifest::load(path)?;
    let schema = manifest.schema();
    let mut tables = Vec::with_capacity(manifest.relations.len());
    for rel in &manifest.relations {
        tables.push(read_relation_csv(&path.join(&rel.file), rel)?);
    }
    let db = Database::new(schema, tables)?;
    let overrides: Vec<(String, String, SemanticOverride)> =
        manifest.relations.iter().flat_map(|r| r.columns.iter().filter_map(move |c| c.semantic.map(|o| (r.name.clone(), c.name.clone(), o)))).collect();
    let text = manifest.text_vectors.as_ref().map(|f| read_text_vectors(&path.join(f))).transpose()?;
    Dataset::from_database(&manifest.name, db, &overrides, manifest.target.clone(), text)
}

fn read_relation_csv(path: &PathBuf, rel: &crate::manifest::RelationSpec) -> Result<Table> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = rdr.headers().map_err(csv_err(path))?.iter().map(str::to_owned).collect();
    let mut pos = Vec::with_capacity(rel.columns.len());
    for c in &rel.columns {
        pos.push(
            header
                .iter()
                .position(|h| *h == c.name)
                .ok_or_else(|| Error::Manifest(format!("{} has no column `{}`", path.display(), c.name)))?,
        );
    }
    let mut rows = Vec::new();
    for (ri, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let mut row = Vec::with_capacity(pos.len());
        for (c, &p) in rel.columns.iter().zip(&pos) {
            let cell = rec.get(p).unwrap_or("");
            row.push(parse_cell(cell, c.raw).map_err(|detail| Error::Cell { relation: rel.name.clone(), row: ri, column: c.name.clone(), detail })?);
        }
        rows.push(row);
    }
    Ok(Table::new(rel.columns.len(), rows))
}

#[derive(Debug, Serialize, Deserialize)]
struct TextVectorLine {
    relation: String,
    column: String,
    row: usize,
    vector: Vec<f64>,
}

/// Reads `{"relation", "column", "row", "vector"}` lines; all vectors share one width.
pub fn read_text_vectors(path: &Path) -> Result<TextVectors> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out: Option<TextVectors> = None;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: TextVectorLine = serde_json::from_str(&line).map_err(json_err(path))?;
        let tv = out.get_or_insert_with(|| TextVectors::new(l.vector.len()));
        tv.insert(&l.relation, &l.column, l.row, l.vector)?;
    }
    Ok(out.unwrap_or_else(|| TextVectors::new(1)))
}

pub fn write_text_vectors(path: &Path, tv: &TextVectors) -> Result<()> {
    let mut s = String::new();
    for ((relation, column, row), v) in &tv.vectors {
        let line = TextVectorLine { relation: relation.clone(), column: column.clone(), row: *row, vector: v.clone() };
        s += &serde_json::to_string(&line).map_err(json_err(path))?;
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Writes every relation of `db` as `<dir>/<file>` following `manifest`, plus the manifest.
pub fn write_dataset(dir: &Path, manifest: &Manifest, db: &Database) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for rel in &manifest.relations {
        let ri = db.schema.relation_index(&rel.name).ok_or_else(|| Error::Manifest(format!("database has no relation `{}`", rel.name)))?;
        let def = &db.schema.relations[ri];
        let cols: Vec<usize> = rel
            .columns
            .iter()
            .map(|c| def.attr_index(&c.name).ok_or_else(|| Error::Manifest(format!("`{}` has no column `{}`", rel.name, c.name))))
            .collect::<Result<_>>()?;
        let path = dir.join(&rel.file);
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(rel.columns.iter().map(|c| c.name.as_str())).map_err(csv_err(&path))?;
        for row in &db.tables[ri].rows {
            w.write_record(cols.iter().map(|&c| format_cell(&row[c]))).map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    manifest.save(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_round_trip() {
        let cases = [
            (Value::Integer(-42), RawType::Integer),
            (Value::Real(0.1), RawType::Real),
            (Value::Real(1e-300), RawType::Real),
            (Value::Real(-3.0), RawType::Real),
            (Value::Text("a, \"b\"\nc".into()), RawType::Text),
            (Value::Timestamp(1_700_000_000), RawType::Timestamp),
            (Value::Boolean(true), RawType::Boolean),
            (Value::Null, RawType::Real),
        ];
        for (v, raw) in cases {
            let back = parse_cell(&format_cell(&v), raw).unwrap();
            assert_eq!(format!("{back:?}"), format!("{v:?}"));
        }
    }

    #[test]
    fn malformed_cells_rejected() {
        assert!(parse_cell("x1", RawType::Integer).is_err());
        assert!(parse_cell("1.5", RawType::Integer).is_err());
        assert!(parse_cell("2024-13-01", RawType::Timestamp).is_err());
        assert!(parse_cell("yes", RawType::Boolean).is_err());
        assert_eq!(parse_cell("2024-01-02T03:04:05Z", RawType::Timestamp).unwrap(), Value::Timestamp(1_704_164_645));
    }
}
