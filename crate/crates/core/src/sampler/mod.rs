//! Learning samples from the hypergraph: BFS expansion, fan-out sampling,
//! label masking, splits and in-database SQL emission.

mod sql;

use alloc::collections::{BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EncodedTable;
use crate::error::{usage, Error, Result};
use crate::hypergraph::{EdgeType, HeteroGraph, NodeRef};
use crate::relmodel::{Database, SchemaDef, SemanticType, Value};

pub use sql::{emit_recursive_sql, SqlPlan, SqlStatement, SEED_TABLE};

pub const TRAIN_FRACTION: f64 = 0.7;
pub const MIN_BATCH: usize = 16;
pub const MAX_BATCH: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Per-depth, per-edge-type neighbor caps. Depths past the end reuse the last entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fanout(pub Vec<Vec<usize>>);

impl Fanout {
    pub fn uniform(depths: usize, edge_types: usize, cap: usize) -> Self {
        Self(vec![vec![cap; edge_types]; depths.max(1)])
    }

    pub fn cap(&self, depth: usize, edge_type: usize) -> usize {
        self.0
            .get(depth)
            .or_else(|| self.0.last())
            .and_then(|caps| caps.get(edge_type).copied())
            .unwrap_or(usize::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub target_relation: usize,
    pub target_attr: String,
    pub task: TaskKind,
    pub depth_limit: Option<usize>,
    pub fanout: Option<Fanout>,
}

impl SampleSpec {
    /// Index of the target attribute; it must exist and not be a key.
    pub fn target_attr_index(&self, schema: &SchemaDef) -> Result<usize> {
        let rel = schema.relations.get(self.target_relation).ok_or_else(|| usage!("unknown target relation {}", self.target_relation))?;
        let idx = rel.attr_index(&self.target_attr).ok_or_else(|| usage!("`{}` has no attribute `{}`", rel.name, self.target_attr))?;
        if rel.is_key_attr(&self.target_attr) || rel.attributes[idx].semantic == SemanticType::Key {
            return Err(usage!("target `{}.{}` is a key attribute", rel.name, self.target_attr));
        }
        Ok(idx)
    }
}

/// Seed labels, held apart from the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Labels of every target row, classification labels remapped to dense indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLabels {
    pub task: TaskKind,
    /// Sorted original class values; empty for regression.
    pub classes: Vec<Value>,
    /// Per target row; `None` where the label is null.
    pub per_row: Vec<Option<f64>>,
}

impl TargetLabels {
    pub fn from_db(db: &Database, spec: &SampleSpec) -> Result<Self> {
        let col = spec.target_attr_index(&db.schema)?;
        let table = &db.tables[spec.target_relation];
        match spec.task {
            TaskKind::Classification => {
                let classes: Vec<Value> = table.rows.iter().map(|r| r[col].clone()).filter(|v| !v.is_null()).collect::<BTreeSet<_>>().into_iter().collect();
                if classes.len() < 2 {
                    return Err(usage!("classification needs at least 2 classes, found {}", classes.len()));
                }
                let per_row = table
                    .rows
                    .iter()
                    .map(|r| if r[col].is_null() { None } else { classes.binary_search(&r[col]).ok().map(|i| i as f64) })
                    .collect();
                Ok(Self { task: spec.task, classes, per_row })
            }
            TaskKind::Regression => {
                let mut per_row = Vec::with_capacity(table.len());
                for (ri, r) in table.rows.iter().enumerate() {
                    per_row.push(match r[col].as_f64() {
                        Some(v) if v.is_finite() => Some(v),
                        Some(v) => return Err(Error::Numeric(alloc::format!("non-finite regression target {v} in row {ri}"))),
                        None => None,
                    });
                }
                Ok(Self { task: spec.task, classes: Vec::new(), per_row })
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Target rows with a non-null label, as seeds.
    pub fn seeds(&self, target_relation: usize) -> Vec<NodeRef> {
        self.per_row.iter().enumerate().filter(|(_, l)| l.is_some()).map(|(r, _)| NodeRef::new(target_relation, r)).collect()
    }

    pub fn labels_for(&self, seeds: &[NodeRef]) -> Result<Labels> {
        let mut vals = Vec::with_capacity(seeds.len());
        for s in seeds {
            vals.push(self.per_row.get(s.row).copied().flatten().ok_or_else(|| usage!("seed row {} has no label", s.row))?);
        }
        Ok(match self.task {
            TaskKind::Classification => Labels::Classes(vals.into_iter().map(|v| v as usize).collect()),
            TaskKind::Regression => Labels::Values(vals),
        })
    }
}

/// Rows reached per relation, ascending.
pub type NodeSet = Vec<BTreeSet<usize>>;

fn all_neighbors(g: &HeteroGraph, n: NodeRef) -> impl Iterator<Item = (EdgeType, NodeRef)> + '_ {
    g.incident_types(n.relation).flat_map(move |et| {
        let adj = g.adjacency(et);
        adj.neighbors(n.row).map(move |t| (et, NodeRef::new(adj.target_relation, t)))
    })
}

/// Every node within `depth_limit` hops of the seeds over forward and reverse
/// edges, each visited once. `None` means unbounded.
pub fn bfs_expand(g: &HeteroGraph, seeds: &[NodeRef], depth_limit: Option<usize>) -> NodeSet {
    let mut seen: NodeSet = vec![BTreeSet::new(); g.num_relations()];
    let mut queue = VecDeque::new();
    for &s in seeds {
        if seen[s.relation].insert(s.row) {
            queue.push_back((s, 0usize));
        }
    }
    while let Some((n, d)) = queue.pop_front() {
        if depth_limit.is_some_and(|lim| d >= lim) {
            continue;
        }
        for (_, m) in all_neighbors(g, n) {
            if seen[m.relation].insert(m.row) {
                queue.push_back((m, d + 1));
            }
        }
    }
    seen
}

/// Level-wise expansion drawing at most `fanout.cap(depth, type)` neighbors
/// per visited node and edge type, without replacement.
pub fn hetero_sample(g: &HeteroGraph, seeds: &[NodeRef], depth_limit: Option<usize>, fanout: &Fanout, rng_seed: u64) -> NodeSet {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut seen: NodeSet = vec![BTreeSet::new(); g.num_relations()];
    let mut frontier: Vec<NodeRef> = Vec::new();
    for &s in seeds {
        if seen[s.relation].insert(s.row) {
            frontier.push(s);
        }
    }
    let mut depth = 0;
    while !frontier.is_empty() && depth_limit.is_none_or(|lim| depth < lim) {
        let mut next = Vec::new();
        for n in &frontier {
            for et in g.incident_types(n.relation) {
                let adj = g.adjacency(et);
                let nbrs: Vec<usize> = adj.neighbors(n.row).collect();
                let cap = fanout.cap(depth, et.id());
                let picked: Vec<usize> = if nbrs.len() <= cap {
                    nbrs
                } else {
                    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, nbrs.len(), cap).into_vec();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| nbrs[i]).collect()
                };
                for t in picked {
                    if seen[adj.target_relation].insert(t) {
                        next.push(NodeRef::new(adj.target_relation, t));
                    }
                }
            }
        }
        frontier = next;
        depth += 1;
    }
    seen
}

/// Edge pairs of one edge type in batch-local row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEdges {
    pub source_relation: usize,
    pub target_relation: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// Seeds plus their induced subgraph with gathered encoded features.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub target_relation: usize,
    pub seeds: Vec<NodeRef>,
    /// Seed positions among the local target rows.
    pub seed_local: Vec<usize>,
    /// Global row ids per relation; local index = position.
    pub rows: Vec<Vec<usize>>,
    /// Indexed by [`EdgeType::id`].
    pub edges: Vec<LocalEdges>,
    pub features: Vec<EncodedTable>,
    pub labels: Labels,
    pub label_mask_applied: bool,
}

impl MiniBatch {
    /// Induces the subgraph of `g` on `nodes` and gathers features for it.
    pub fn assemble(g: &HeteroGraph, encoded: &[EncodedTable], nodes: &NodeSet, seeds: &[NodeRef], labels: Labels) -> Result<Self> {
        let target = seeds.first().map_or(0, |s| s.relation);
        if seeds.iter().any(|s| s.relation != target) {
            return Err(usage!("seeds span several relations"));
        }
        if labels.len() != seeds.len() {
            return Err(usage!("{} labels for {} seeds", labels.len(), seeds.len()));
        }
        let rows: Vec<Vec<usize>> = nodes.iter().map(|s| s.iter().copied().collect()).collect();
        let local = |rel: usize, row: usize| rows[rel].binary_search(&row).ok();
        let mut seed_local = Vec::with_capacity(seeds.len());
        for s in seeds {
            seed_local.push(local(s.relation, s.row).ok_or_else(|| usage!("seed {s:?} missing from the node set"))?);
        }
        let mut edges = Vec::with_capacity(g.num_edge_types());
        for et in g.edge_types() {
            let adj = g.adjacency(et);
            let mut pairs = Vec::new();
            for (ls, &s) in rows[adj.source_relation].iter().enumerate() {
                for t in adj.neighbors(s) {
                    if let Some(lt) = local(adj.target_relation, t) {
                        pairs.push((ls, lt));
                    }
                }
            }
            edges.push(LocalEdges { source_relation: adj.source_relation, target_relation: adj.target_relation, pairs });
        }
        let features = encoded.iter().zip(&rows).map(|(t, r)| t.gather(r)).collect();
        Ok(Self { target_relation: target, seeds: seeds.to_vec(), seed_local, rows, edges, features, labels, label_mask_applied: false })
    }

    pub fn num_nodes(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// Replaces the target column of every target-relation row in the batch by the sentinel.
pub fn mask_targets(mut batch: MiniBatch, spec: &SampleSpec, schema: &SchemaDef) -> Result<MiniBatch> {
    if batch.label_mask_applied {
        return Err(usage!("batch is already masked"));
    }
    let col = spec.target_attr_index(schema)?;
    let table = batch.features.get_mut(spec.target_relation).ok_or_else(|| usage!("batch lacks the target relation"))?;
    if table.columns.get(col).is_some_and(Option::is_some) {
        table.mask_column(col)?;
    }
    batch.label_mask_applied = true;
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self { train_fraction: TRAIN_FRACTION, seed }
    }
}

/// Shuffles deterministically and cuts at `round(train_fraction · n)`.
pub fn split_train_val(seeds: &[NodeRef], spec: SplitSpec) -> Result<(Vec<NodeRef>, Vec<NodeRef>)> {
    if seeds.len() < 2 {
        return Err(usage!("splitting needs at least 2 seeds, got {}", seeds.len()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(usage!("train fraction {} outside (0, 1)", spec.train_fraction));
    }
    let mut v = seeds.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let cut = (libm::round(spec.train_fraction * v.len() as f64) as usize).clamp(1, v.len() - 1);
    let val = v.split_off(cut);
    Ok((v, val))
}

/// `clamp(2^round(log2(scale · √target_rows)), 16, 16384)`.
pub fn batch_size(scale: f64, target_rows: usize) -> usize {
    let x = scale * libm::sqrt(target_rows as f64);
    if !(x >= 1.0) {
        return MIN_BATCH;
    }
    let e = libm::round(libm::log2(x)).min(30.0) as u32;
    (1usize << e).clamp(MIN_BATCH, MAX_BATCH)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hypergraph::{build_hypergraph, IntegrityMode};
    use crate::relmodel::tests::{attr, rel};
    use crate::relmodel::{RawType, Table};

    /// `t(fk → s)`, `s(fk → u)` chain plus a self-reference on `u`.
    pub(crate) fn chain_graph() -> HeteroGraph {
        let schema = SchemaDef {
            relations: vec![
                rel("t", vec![attr("id", RawType::Integer), attr("s_id", RawType::Integer), attr("y", RawType::Integer)], &["id"], &[(&["s_id"], "s")]),
                rel("s", vec![attr("id", RawType::Integer), attr("u_id", RawType::Integer)], &["id"], &[(&["u_id"], "u")]),
                rel("u", vec![attr("id", RawType::Integer), attr("next", RawType::Integer)], &["id"], &[(&["next"], "u")]),
            ],
        };
        let i = Value::Integer;
        let t = Table::new(3, vec![vec![i(0), i(0), i(1)], vec![i(1), i(0), i(0)], vec![i(2), i(1), i(1)], vec![i(3), i(1), i(0)], vec![i(4), i(1), i(1)]]);
        let s = Table::new(2, vec![vec![i(0), i(0)], vec![i(1), i(1)]]);
        let u = Table::new(2, vec![vec![i(0), i(1)], vec![i(1), i(0)], vec![i(2), Value::Null]]);
        let db = Database::new(schema, vec![t, s, u]).unwrap();
        build_hypergraph(db, IntegrityMode::Strict).unwrap().0
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn bfs_depths() {
        let g = chain_graph();
        let seeds = [NodeRef::new(0, 0)];
        assert_eq!(bfs_expand(&g, &seeds, Some(0)), vec![set(&[0]), set(&[]), set(&[])]);
        assert_eq!(bfs_expand(&g, &seeds, Some(1)), vec![set(&[0]), set(&[0]), set(&[])]);
        // t0 → s0 → {t1, u0}
        assert_eq!(bfs_expand(&g, &seeds, Some(2)), vec![set(&[0, 1]), set(&[0]), set(&[0])]);
        // the u0 ↔ u1 cycle terminates
        assert_eq!(bfs_expand(&g, &seeds, None), vec![set(&[0, 1, 2, 3, 4]), set(&[0, 1]), set(&[0, 1])]);
    }

    #[test]
    fn fanout_caps_and_determinism() {
        let g = chain_graph();
        let seeds = [NodeRef::new(1, 1)];
        // s1 has 3 referencing t rows
        let cap2 = Fanout::uniform(1, g.num_edge_types(), 2);
        let a = hetero_sample(&g, &seeds, Some(1), &cap2, 5);
        assert_eq!(a[0].len(), 2);
        assert_eq!(a, hetero_sample(&g, &seeds, Some(1), &cap2, 5));
        let wide = Fanout::uniform(1, g.num_edge_types(), 100);
        for d in 0..5 {
            assert_eq!(hetero_sample(&g, &seeds, Some(d), &wide, 1), bfs_expand(&g, &seeds, Some(d)));
        }
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let seeds: Vec<NodeRef> = (0..10).map(|r| NodeRef::new(0, r)).collect();
        let (tr, va) = split_train_val(&seeds, SplitSpec::new(3)).unwrap();
        assert_eq!((tr.len(), va.len()), (7, 3));
        assert_eq!(split_train_val(&seeds, SplitSpec::new(3)).unwrap(), (tr.clone(), va.clone()));
        let all: BTreeSet<_> = tr.iter().chain(&va).copied().collect();
        assert_eq!(all.len(), 10);
        assert!(split_train_val(&seeds[..1], SplitSpec::new(0)).is_err());
    }

    #[test]
    fn batch_size_convention() {
        assert_eq!(batch_size(1.0, 0), 16);
        assert_eq!(batch_size(1.0, 1000), 32);
        assert_eq!(batch_size(256.0, 1_000_000), 16_384);
        assert_eq!(batch_size(4.0, 1024), 128);
    }
}
