//! Single-file SQLite databases: schema introspection, loading, writing, and
//! executing emitted sampling SQL.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dbscheme_core::datetime::{format_iso8601, parse_iso8601};
use dbscheme_core::relmodel::{AttributeDef, Database, ForeignKeyDef, RawType, RelationDef, SchemaDef, Table, Value};
use dbscheme_core::sampler::{SqlPlan, SEED_TABLE};
use rusqlite::types::ValueRef;
use rusqlite::{params_from_iter, Connection, OpenFlags};

use crate::error::{Error, Result};

fn quote(ident: &str) -> String {
    format!("\"{}\"", ident.replace('"', "\"\""))
}

/// Maps a declared column type to a raw type using SQLite's affinity rules,
/// with boolean and timestamp declarations recognized first.
pub fn raw_type_of(decl: &str) -> RawType {
    let d = decl.to_ascii_uppercase();
    if d.contains("BOOL") {
        RawType::Boolean
    } else if d.contains("TIMESTAMP") || d.contains("DATE") || d.contains("TIME") {
        RawType::Timestamp
    } else if d.contains("INT") {
        RawType::Integer
    } else if d.contains("CHAR") || d.contains("CLOB") || d.contains("TEXT") {
        RawType::Text
    } else if d.contains("REAL") || d.contains("FLOA") || d.contains("DOUB") || d.contains("NUM") || d.contains("DEC") {
        RawType::Real
    } else {
        RawType::Text
    }
}

fn sql_type(raw: RawType) -> &'static str {
    match raw {
        RawType::Integer => "INTEGER",
        RawType::Real => "REAL",
        RawType::Text => "TEXT",
        RawType::Timestamp => "TIMESTAMP",
        RawType::Boolean => "BOOLEAN",
    }
}

fn cell(v: ValueRef, raw: RawType, rel: &str, row: usize, col: &str) -> Result<Value> {
    let bad = |detail: String| Error::Cell { relation: rel.into(), row, column: col.into(), detail };
    Ok(match (v, raw) {
        (ValueRef::Null, _) => Value::Null,
        (ValueRef::Integer(i), RawType::Integer) => Value::Integer(i),
        (ValueRef::Integer(i), RawType::Real) => Value::Real(i as f64),
        (ValueRef::Real(x), RawType::Real) => Value::Real(x),
        (ValueRef::Integer(i), RawType::Boolean) => Value::Boolean(i != 0),
        (ValueRef::Integer(i), RawType::Timestamp) => Value::Timestamp(i),
        (ValueRef::Text(t), RawType::Timestamp) => {
            let s = String::from_utf8_lossy(t);
            Value::Timestamp(parse_iso8601(&s).ok_or_else(|| bad(format!("`{s}` is not an ISO-8601 timestamp")))?)
        }
        (ValueRef::Text(t), RawType::Text) => Value::Text(String::from_utf8_lossy(t).into_owned()),
        (ValueRef::Integer(i), RawType::Text) => Value::Text(i.to_string()),
        (ValueRef::Real(x), RawType::Text) => Value::Text(x.to_string()),
        (other, raw) => return Err(bad(format!("{:?} value stored in a {raw:?} column", other.data_type()))),
    })
}

/// Reads every user table with its columns, primary key and foreign keys.
pub fn read_sqlite(path: &Path) -> Result<Database> {
    let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY)?;
    let names: Vec<String> = {
        let mut st = conn.prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")?;
        let rows = st.query_map([], |r| r.get(0))?;
        rows.collect::<rusqlite::Result<_>>()?
    };
    let mut relations = Vec::new();
    let mut tables = Vec::new();
    for name in &names {
        let mut attributes = Vec::new();
        let mut pk: Vec<(i64, String)> = Vec::new();
        {
            let mut st = conn.prepare(&format!("PRAGMA table_info({})", quote(name)))?;
            let mut rows = st.query([])?;
            while let Some(r) = rows.next()? {
                let col: String = r.get(1)?;
                let decl: String = r.get::<_, Option<String>>(2)?.unwrap_or_default();
                let pk_pos: i64 = r.get(5)?;
                if pk_pos > 0 {
                    pk.push((pk_pos, col.clone()));
                }
                attributes.push(AttributeDef::new(col, raw_type_of(&decl)));
            }
        }
        pk.sort();
        let mut fks: BTreeMap<i64, (String, Vec<(i64, String)>)> = BTreeMap::new();
        {
            let mut st = conn.prepare(&format!("PRAGMA foreign_key_list({})", quote(name)))?;
            let mut rows = st.query([])?;
            while let Some(r) = rows.next()? {
                let id: i64 = r.get(0)?;
                let seq: i64 = r.get(1)?;
                let target: String = r.get(2)?;
                let from: String = r.get(3)?;
                fks.entry(id).or_insert_with(|| (target, Vec::new())).1.push((seq, from));
            }
        }
        let fks = fks
            .into_values()
            .map(|(target, mut cols)| {
                cols.sort();
                ForeignKeyDef { source_relation: name.clone(), source_attrs: cols.into_iter().map(|c| c.1).collect(), target_relation: target }
            })
            .collect();
        let cols: Vec<String> = attributes.iter().map(|a: &AttributeDef| quote(&a.name)).collect();
        let order: Vec<String> = pk.iter().map(|p| quote(&p.1)).collect();
        let order = if order.is_empty() { "rowid".to_string() } else { order.join(", ") };
        let mut st = conn.prepare(&format!("SELECT {} FROM {} ORDER BY {order}", cols.join(", "), quote(name)))?;
        let mut rows = st.query([])?;
        let mut data = Vec::new();
        while let Some(r) = rows.next()? {
            let mut row = Vec::with_capacity(attributes.len());
            for (i, a) in attributes.iter().enumerate() {
                row.push(cell(r.get_ref(i)?, a.raw, name, data.len(), &a.name)?);
            }
            data.push(row);
        }
        tables.push(Table::new(attributes.len(), data));
        relations.push(RelationDef { name: name.clone(), attributes, pk_attrs: pk.into_iter().map(|p| p.1).collect(), fks });
    }
    Ok(Database::new(SchemaDef { relations }, tables)?)
}

fn to_sql(v: &Value) -> rusqlite::types::Value {
    use rusqlite::types::Value as S;
    match v {
        Value::Null => S::Null,
        Value::Integer(i) => S::Integer(*i),
        Value::Real(x) => S::Real(*x),
        Value::Text(s) => S::Text(s.clone()),
        Value::Timestamp(t) => S::Text(format_iso8601(*t)),
        Value::Boolean(b) => S::Integer(*b as i64),
    }
}

/// Creates one table per relation with declared keys and inserts all rows.
pub fn write_sqlite(conn: &mut Connection, db: &Database) -> Result<()> {
    let tx = conn.transaction()?;
    for (rel, table) in db.schema.relations.iter().zip(&db.tables) {
        let mut defs: Vec<String> = rel.attributes.iter().map(|a| format!("{} {}", quote(&a.name), sql_type(a.raw))).collect();
        if !rel.pk_attrs.is_empty() {
            defs.push(format!("PRIMARY KEY ({})", rel.pk_attrs.iter().map(|a| quote(a)).collect::<Vec<_>>().join(", ")));
        }
        for fk in &rel.fks {
            let target = db.schema.relation(&fk.target_relation).ok_or_else(|| Error::Usage(format!("unknown relation `{}`", fk.target_relation)))?;
            defs.push(format!(
                "FOREIGN KEY ({}) REFERENCES {} ({})",
                fk.source_attrs.iter().map(|a| quote(a)).collect::<Vec<_>>().join(", "),
                quote(&fk.target_relation),
                target.pk_attrs.iter().map(|a| quote(a)).collect::<Vec<_>>().join(", ")
            ));
        }
        tx.execute(&format!("CREATE TABLE {} ({})", quote(&rel.name), defs.join(", ")), [])?;
        let marks = vec!["?"; rel.arity()].join(", ");
        let mut st = tx.prepare(&format!("INSERT INTO {} VALUES ({marks})", quote(&rel.name)))?;
        for row in &table.rows {
            st.execute(params_from_iter(row.iter().map(to_sql)))?;
        }
    }
    tx.commit()?;
    Ok(())
}

/// Fills the seed table with the primary keys of the given target rows, runs
/// every statement of `plan` and maps the returned tuples back to row indices.
pub fn execute_plan(conn: &Connection, db: &Database, target: usize, plan: &SqlPlan, seed_rows: &[usize]) -> Result<Vec<BTreeSet<usize>>> {
    let trel = &db.schema.relations[target];
    let pk = trel.pk_indices();
    let cols: Vec<String> = pk.iter().map(|&c| format!("{} {}", quote(&trel.attributes[c].name), sql_type(trel.attributes[c].raw))).collect();
    conn.execute(&format!("DROP TABLE IF EXISTS {}", quote(SEED_TABLE)), [])?;
    conn.execute(&format!("CREATE TEMP TABLE {} ({})", quote(SEED_TABLE), cols.join(", ")), [])?;
    {
        let marks = vec!["?"; pk.len()].join(", ");
        let mut st = conn.prepare(&format!("INSERT INTO {} VALUES ({marks})", quote(SEED_TABLE)))?;
        for &r in seed_rows {
            st.execute(params_from_iter(pk.iter().map(|&c| to_sql(&db.tables[target].rows[r][c]))))?;
        }
    }
    let mut out = vec![BTreeSet::new(); db.tables.len()];
    for s in &plan.statements {
        let rel = &db.schema.relations[s.relation];
        let table = &db.tables[s.relation];
        let pk = rel.pk_indices();
        let index: BTreeMap<Vec<Value>, usize> = (0..table.len()).map(|r| (table.key_of(r, &pk), r)).collect();
        let mut st = conn.prepare(&s.sql)?;
        let mut rows = st.query([])?;
        while let Some(r) = rows.next()? {
            let mut key = Vec::with_capacity(pk.len());
            for &c in &pk {
                key.push(cell(r.get_ref(c)?, rel.attributes[c].raw, &rel.name, 0, &rel.attributes[c].name)?);
            }
            let row = index.get(&key).ok_or_else(|| Error::Usage(format!("query returned unknown `{}` key {key:?}", rel.name)))?;
            out[s.relation].insert(*row);
        }
    }
    conn.execute(&format!("DROP TABLE {}", quote(SEED_TABLE)), [])?;
    Ok(out)
}
