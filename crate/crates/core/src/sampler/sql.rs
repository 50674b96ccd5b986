use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::SampleSpec;
use crate::error::{usage, Result};
use crate::relmodel::{ResolvedFk, SchemaDef};

/// Name of the table the caller fills with seed primary keys.
pub const SEED_TABLE: &str = "_seed";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqlStatement {
    pub relation: usize,
    /// Shortest hop count at which the relation is reachable.
    pub depth: usize,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqlPlan {
    pub statements: Vec<SqlStatement>,
}

impl SqlPlan {
    pub fn to_text(&self, schema: &SchemaDef) -> String {
        let mut out = String::new();
        for s in &self.statements {
            out += &format!("-- {} depth {}\n{};\n", quote(&schema.relations[s.relation].name), s.depth, s.sql);
        }
        out
    }
}

fn quote(ident: &str) -> String {
    format!("\"{}\"", ident.replace('"', "\"\""))
}

#[derive(Clone, Copy)]
struct Step {
    fk: usize,
    forward: bool,
}

fn join_cond(schema: &SchemaDef, fk: &ResolvedFk, forward: bool, prev: &str, next: &str) -> String {
    let src = &schema.relations[fk.source];
    let tgt = &schema.relations[fk.target];
    let pairs = fk.source_cols.iter().zip(&fk.target_cols).map(|(&s, &t)| {
        let (s, t) = (quote(&src.attributes[s].name), quote(&tgt.attributes[t].name));
        if forward {
            format!("{prev}.{s} = {next}.{t}")
        } else {
            format!("{prev}.{t} = {next}.{s}")
        }
    });
    pairs.collect::<Vec<_>>().join(" AND ")
}

fn walk_sql(schema: &SchemaDef, fks: &[ResolvedFk], target: usize, walk: &[Step]) -> String {
    let rel = |i: usize| quote(&schema.relations[i].name);
    let alias = |i: usize| quote(&format!("t{i}"));
    let mut from = format!("{} AS {}", rel(target), alias(0));
    for (i, st) in walk.iter().enumerate() {
        let fk = &fks[st.fk];
        let next = if st.forward { fk.target } else { fk.source };
        from += &format!(" JOIN {} AS {} ON {}", rel(next), alias(i + 1), join_cond(schema, fk, st.forward, &alias(i), &alias(i + 1)));
    }
    let pk: Vec<usize> = schema.relations[target].pk_indices();
    let names: Vec<String> = pk.iter().map(|&c| quote(&schema.relations[target].attributes[c].name)).collect();
    let lhs: Vec<String> = names.iter().map(|n| format!("{}.{n}", alias(0))).collect();
    format!(
        "SELECT {}.* FROM {from} WHERE ({}) IN (SELECT {} FROM {})",
        alias(walk.len()),
        lhs.join(", "),
        names.join(", "),
        quote(SEED_TABLE)
    )
}

/// For every relation reachable from the target within `depth` hops, one
/// statement returning exactly the rows a depth-limited BFS from the seeds in
/// `"_seed"` visits: the union of all FK join walks of length at most `depth`,
/// taken in both directions. Unreachable relations are omitted.
pub fn emit_recursive_sql(schema: &SchemaDef, spec: &SampleSpec, depth: usize) -> Result<SqlPlan> {
    let target = spec.target_relation;
    if target >= schema.relations.len() {
        return Err(usage!("unknown target relation {target}"));
    }
    let fks = schema.foreign_keys();
    let mut walks: BTreeMap<usize, (usize, Vec<String>)> = BTreeMap::new();
    let mut stack: Vec<(usize, Vec<Step>)> = alloc::vec![(target, Vec::new())];
    while let Some((cur, walk)) = stack.pop() {
        let sql = walk_sql(schema, &fks, target, &walk);
        let entry = walks.entry(cur).or_insert((walk.len(), Vec::new()));
        entry.0 = entry.0.min(walk.len());
        entry.1.push(sql);
        if walk.len() == depth {
            continue;
        }
        for (fi, fk) in fks.iter().enumerate().rev() {
            for forward in [false, true] {
                let (from, to) = if forward { (fk.source, fk.target) } else { (fk.target, fk.source) };
                if from == cur {
                    let mut w = walk.clone();
                    w.push(Step { fk: fi, forward });
                    stack.push((to, w));
                }
            }
        }
    }
    let mut statements: Vec<SqlStatement> = walks
        .into_iter()
        .map(|(relation, (d, mut parts))| {
            parts.sort();
            parts.dedup();
            SqlStatement { relation, depth: d, sql: parts.join("\nUNION\n") }
        })
        .collect();
    statements.sort_by_key(|s| (s.depth, s.relation));
    Ok(SqlPlan { statements })
}

#[cfg(test)]
mod tests {
    use super::super::TaskKind;
    use super::*;
    use crate::relmodel::tests::{attr, rel};
    use crate::relmodel::RawType;

    fn ts() -> SchemaDef {
        SchemaDef {
            relations: alloc::vec![
                rel("T", alloc::vec![attr("id", RawType::Integer), attr("fk", RawType::Integer)], &["id"], &[(&["fk"], "S")]),
                rel("S", alloc::vec![attr("pk", RawType::Integer)], &["pk"], &[]),
            ],
        }
    }

    fn spec(target: usize) -> SampleSpec {
        SampleSpec { target_relation: target, target_attr: "id".into(), task: TaskKind::Classification, depth_limit: None, fanout: None }
    }

    #[test]
    fn depth_one_forward() {
        let plan = emit_recursive_sql(&ts(), &spec(0), 1).unwrap();
        assert_eq!(plan.statements.len(), 2);
        assert_eq!(plan.statements[0].sql, "SELECT \"t0\".* FROM \"T\" AS \"t0\" WHERE (\"t0\".\"id\") IN (SELECT \"id\" FROM \"_seed\")");
        assert_eq!(
            plan.statements[1].sql,
            "SELECT \"t1\".* FROM \"T\" AS \"t0\" JOIN \"S\" AS \"t1\" ON \"t0\".\"fk\" = \"t1\".\"pk\" WHERE (\"t0\".\"id\") IN (SELECT \"id\" FROM \"_seed\")"
        );
    }

    #[test]
    fn depth_zero_and_reverse() {
        assert_eq!(emit_recursive_sql(&ts(), &spec(0), 0).unwrap().statements.len(), 1);
        let plan = emit_recursive_sql(&ts(), &spec(1), 1).unwrap();
        assert_eq!(plan.statements[1].relation, 0);
        assert!(plan.statements[1].sql.contains("JOIN \"T\" AS \"t1\" ON \"t0\".\"pk\" = \"t1\".\"fk\""));
        assert_eq!(plan, emit_recursive_sql(&ts(), &spec(1), 1).unwrap());
    }
}
