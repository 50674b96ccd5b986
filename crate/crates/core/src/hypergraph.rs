//! The two-level relational hypergraph: tuples are typed nodes carrying their
//! attribute tokens, and every FK match contributes a forward and a reverse edge.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::relmodel::{pk_index, Database, ResolvedFk, SemanticType, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub relation: usize,
    pub row: usize,
}

impl NodeRef {
    pub fn new(relation: usize, row: usize) -> Self {
        Self { relation, row }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Referencing row to referenced row.
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeType {
    pub fk: usize,
    pub direction: Direction,
}

impl EdgeType {
    /// Dense id: `2 * fk` for forward, `2 * fk + 1` for reverse.
    pub fn id(&self) -> usize {
        self.fk * 2 + (self.direction == Direction::Reverse) as usize
    }

    pub fn from_id(id: usize) -> Self {
        let direction = if id.is_multiple_of(2) { Direction::Forward } else { Direction::Reverse };
        Self { fk: id / 2, direction }
    }

    pub fn mirrored(&self) -> Self {
        let direction = match self.direction {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        };
        Self { fk: self.fk, direction }
    }
}

/// Sorted `(source row, target row)` pairs of one edge type plus a CSR offset
/// index over source rows. A source row receives messages from its targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    pub source_relation: usize,
    pub target_relation: usize,
    pub pairs: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl Adjacency {
    pub fn new(source_relation: usize, target_relation: usize, source_rows: usize, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let mut offsets = vec![0usize; source_rows + 1];
        for &(s, _) in &pairs {
            offsets[s + 1] += 1;
        }
        for i in 0..source_rows {
            offsets[i + 1] += offsets[i];
        }
        Self { source_relation, target_relation, pairs, offsets }
    }

    /// Targets adjacent to `row`, ascending.
    pub fn neighbors(&self, row: usize) -> impl ExactSizeIterator<Item = usize> + '_ {
        let range = match (self.offsets.get(row), self.offsets.get(row + 1)) {
            (Some(&a), Some(&b)) => a..b,
            _ => 0..0,
        };
        self.pairs[range].iter().map(|&(_, t)| t)
    }

    pub fn degree(&self, row: usize) -> usize {
        self.neighbors(row).len()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// What to do with an FK value that matches no primary key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrityMode {
    Strict,
    #[default]
    Drop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub db: Database,
    pub fks: Vec<ResolvedFk>,
    /// Indexed by [`EdgeType::id`].
    pub adjacency: Vec<Adjacency>,
}

impl HeteroGraph {
    pub fn num_relations(&self) -> usize {
        self.db.tables.len()
    }

    pub fn num_edge_types(&self) -> usize {
        self.adjacency.len()
    }

    pub fn row_count(&self, relation: usize) -> usize {
        self.db.tables[relation].len()
    }

    pub fn edge_types(&self) -> impl Iterator<Item = EdgeType> {
        (0..self.adjacency.len()).map(EdgeType::from_id)
    }

    pub fn adjacency(&self, et: EdgeType) -> &Adjacency {
        &self.adjacency[et.id()]
    }

    /// Edge types whose source (message-receiving) relation is `relation`.
    pub fn incident_types(&self, relation: usize) -> impl Iterator<Item = EdgeType> + '_ {
        self.edge_types().filter(move |et| self.adjacency(*et).source_relation == relation)
    }
}

/// Builds the graph: one node per tuple and, per FK, one forward edge per
/// matching (referencing, referenced) row pair plus its reverse. Null FK cells
/// produce no edge. Dangling references fail in `Strict` mode and are dropped
/// with a warning in `Drop` mode.
pub fn build_hypergraph(db: Database, mode: IntegrityMode) -> Result<(HeteroGraph, Vec<String>)> {
    let fks = db.schema.foreign_keys();
    let mut warnings = Vec::new();
    let mut adjacency = Vec::with_capacity(fks.len() * 2);
    for (fi, fk) in fks.iter().enumerate() {
        let src_table = &db.tables[fk.source];
        let index = pk_index(&db.tables[fk.target], &fk.target_cols);
        let mut forward = Vec::new();
        for r in 0..src_table.len() {
            let key = src_table.key_of(r, &fk.source_cols);
            if key.iter().any(Value::is_null) {
                continue;
            }
            match index.get(&key) {
                Some(targets) => forward.extend(targets.iter().map(|&t| (r, t))),
                None => {
                    let msg = format!(
                        "`{}` row {r}: foreign key {fi} value {key:?} matches no row of `{}`",
                        db.schema.relations[fk.source].name, db.schema.relations[fk.target].name
                    );
                    if mode == IntegrityMode::Strict {
                        return Err(Error::Integrity(msg));
                    }
                    warnings.push(msg);
                }
            }
        }
        let reverse = forward.iter().map(|&(u, v)| (v, u)).collect();
        let (ns, nt) = (src_table.len(), db.tables[fk.target].len());
        adjacency.push(Adjacency::new(fk.source, fk.target, ns, forward));
        adjacency.push(Adjacency::new(fk.target, fk.source, nt, reverse));
    }
    Ok((HeteroGraph { db, fks, adjacency }, warnings))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_relations: usize,
    /// Forward FK count.
    pub num_edge_types: usize,
    /// Non-key attributes of the target relation.
    pub num_target_feature_cols: usize,
    /// Mean forward plus reverse degree over target rows.
    pub avg_target_edges: f64,
    pub total_rows: usize,
    /// Forward edges only.
    pub total_edges: usize,
    pub has_text_col: bool,
    pub has_time_col: bool,
}

pub fn graph_stats(g: &HeteroGraph, target: usize) -> Result<GraphStats> {
    if target >= g.num_relations() && !(g.num_relations() == 0 && target == 0) {
        return Err(usage!("unknown target relation {target}"));
    }
    let mut stats = GraphStats {
        num_relations: g.num_relations(),
        num_edge_types: g.fks.len(),
        total_rows: g.db.tables.iter().map(|t| t.len()).sum(),
        total_edges: g.edge_types().filter(|e| e.direction == Direction::Forward).map(|e| g.adjacency(e).len()).sum(),
        ..Default::default()
    };
    for rel in &g.db.schema.relations {
        for a in &rel.attributes {
            stats.has_text_col |= a.semantic == SemanticType::Text;
            stats.has_time_col |= a.semantic == SemanticType::Datetime;
        }
    }
    if let Some(rel) = g.db.schema.relations.get(target) {
        stats.num_target_feature_cols = rel.attributes.iter().filter(|a| !rel.is_key_attr(&a.name)).count();
        let rows = g.row_count(target);
        if rows > 0 {
            let edges: usize = g.incident_types(target).map(|e| g.adjacency(e).len()).sum();
            stats.avg_target_edges = edges as f64 / rows as f64;
        }
    }
    Ok(stats)
}
