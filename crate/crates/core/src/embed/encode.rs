//! Cell values to embedder inputs. Encoders are fitted once per database and
//! then applied to any database with the same schema.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datetime::{civil, parse_iso8601};
use crate::error::{usage, Error, Result};
use crate::relmodel::{Database, SemanticType, Table, Value};

/// Width of the cyclic timestamp feature vector: six sin/cos pairs plus a year channel.
pub const TIME_FEATURES: usize = 13;
/// Width of hashed text vectors when no precomputed vectors are supplied.
pub const HASH_TEXT_DIM: usize = 64;

/// Cyclic calendar features of a UTC timestamp.
pub fn timestamp_features(ts: i64) -> [f64; TIME_FEATURES] {
    let c = civil(ts);
    let periods = [
        (c.month as f64 - 1.0) / 12.0,
        (c.day as f64 - 1.0) / 31.0,
        c.weekday as f64 / 7.0,
        c.hour as f64 / 24.0,
        c.minute as f64 / 60.0,
        c.second as f64 / 60.0,
    ];
    let mut out = [0.0; TIME_FEATURES];
    for (i, p) in periods.iter().enumerate() {
        let a = 2.0 * core::f64::consts::PI * p;
        out[2 * i] = libm::sin(a);
        out[2 * i + 1] = libm::cos(a);
    }
    out[12] = (c.year as f64 - 2000.0) / 100.0;
    out
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Signed feature hashing of lowercase character trigrams (with boundary
/// markers) into `dim` buckets, L2-normalized. Empty text maps to zeros.
pub fn hash_text(s: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    let chars: Vec<char> = core::iter::once('\u{2}')
        .chain(s.chars().flat_map(char::to_lowercase))
        .chain(core::iter::once('\u{3}'))
        .collect();
    if chars.len() <= 2 {
        return v;
    }
    for w in chars.windows(3.min(chars.len())) {
        let mut buf = [0u8; 12];
        let mut n = 0;
        for c in w {
            n += c.encode_utf8(&mut buf[n..]).len();
        }
        let h = fnv1a(buf[..n].iter().copied());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Precomputed text vectors keyed by (relation, column, row).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextVectors {
    pub dim: usize,
    pub vectors: BTreeMap<(String, String, usize), Vec<f64>>,
}

impl TextVectors {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: BTreeMap::new() }
    }

    pub fn insert(&mut self, relation: &str, column: &str, row: usize, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(usage!("text vector of length {} where {} expected", v.len(), self.dim));
        }
        self.vectors.insert((relation.into(), column.into(), row), v);
        Ok(())
    }

    pub fn get(&self, relation: &str, column: &str, row: usize) -> Option<&[f64]> {
        self.vectors.get(&(relation.into(), column.into(), row)).map(Vec::as_slice)
    }
}

/// How one feature attribute is turned into numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttrEncoder {
    /// Sorted distinct non-null values; index `vocab.len()` is the sentinel.
    Categorical { vocab: Vec<Value> },
    /// Z-scored with the fitted mean and standard deviation.
    Numeric { mean: f64, std: f64 },
    Timestamp,
    Text { dim: usize },
}

/// Encoded values of one column over the rows of a table.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Categorical { index: Vec<usize>, cardinality: usize },
    Numeric { value: Vec<f64>, masked: Vec<bool> },
    /// Row-major `rows × TIME_FEATURES`.
    Timestamp { features: Vec<f64>, masked: Vec<bool> },
    /// Row-major `rows × dim`.
    Text { vectors: Vec<f64>, dim: usize, masked: Vec<bool> },
}

impl ColumnData {
    pub fn rows(&self) -> usize {
        match self {
            ColumnData::Categorical { index, .. } => index.len(),
            ColumnData::Numeric { masked, .. } | ColumnData::Timestamp { masked, .. } | ColumnData::Text { masked, .. } => masked.len(),
        }
    }

    fn gather(&self, rows: &[usize]) -> Self {
        fn pick<T: Copy>(v: &[T], rows: &[usize], w: usize) -> Vec<T> {
            rows.iter().flat_map(|&r| v[r * w..(r + 1) * w].iter().copied()).collect()
        }
        match self {
            ColumnData::Categorical { index, cardinality } => ColumnData::Categorical { index: pick(index, rows, 1), cardinality: *cardinality },
            ColumnData::Numeric { value, masked } => ColumnData::Numeric { value: pick(value, rows, 1), masked: pick(masked, rows, 1) },
            ColumnData::Timestamp { features, masked } => {
                ColumnData::Timestamp { features: pick(features, rows, TIME_FEATURES), masked: pick(masked, rows, 1) }
            }
            ColumnData::Text { vectors, dim, masked } => ColumnData::Text { vectors: pick(vectors, rows, *dim), dim: *dim, masked: pick(masked, rows, 1) },
        }
    }

    /// Replaces every cell with the sentinel.
    fn mask_all(&mut self) {
        match self {
            ColumnData::Categorical { index, cardinality } => index.iter_mut().for_each(|i| *i = *cardinality),
            ColumnData::Numeric { value, masked } => {
                value.iter_mut().for_each(|v| *v = 0.0);
                masked.iter_mut().for_each(|m| *m = true);
            }
            ColumnData::Timestamp { features, masked } => {
                features.iter_mut().for_each(|v| *v = 0.0);
                masked.iter_mut().for_each(|m| *m = true);
            }
            ColumnData::Text { vectors, masked, .. } => {
                vectors.iter_mut().for_each(|v| *v = 0.0);
                masked.iter_mut().for_each(|m| *m = true);
            }
        }
    }
}

/// Encoded feature columns of one relation, indexed by attribute position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTable {
    pub rows: usize,
    pub columns: Vec<Option<ColumnData>>,
}

impl EncodedTable {
    pub fn gather(&self, rows: &[usize]) -> Self {
        Self { rows: rows.len(), columns: self.columns.iter().map(|c| c.as_ref().map(|c| c.gather(rows))).collect() }
    }

    pub fn mask_column(&mut self, attr: usize) -> Result<()> {
        match self.columns.get_mut(attr) {
            Some(Some(c)) => {
                c.mask_all();
                Ok(())
            }
            _ => Err(usage!("attribute {attr} has no encoded column to mask")),
        }
    }
}

/// Fitted encoders for every feature attribute of every relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoders {
    /// `[relation][attribute]`; `None` for keys and ignored columns.
    pub attrs: Vec<Vec<Option<AttrEncoder>>>,
}

fn fit_attr(table: &Table, col: usize, semantic: SemanticType, text_dim: usize) -> Option<AttrEncoder> {
    match semantic {
        SemanticType::Categorical { .. } => {
            let vocab: BTreeSet<&Value> = table.rows.iter().map(|r| &r[col]).filter(|v| !v.is_null()).collect();
            Some(AttrEncoder::Categorical { vocab: vocab.into_iter().cloned().collect() })
        }
        SemanticType::Numeric => {
            let xs: Vec<f64> = table.rows.iter().filter_map(|r| r[col].as_f64()).filter(|v| v.is_finite()).collect();
            let n = xs.len().max(1) as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let std = libm::sqrt(var);
            Some(AttrEncoder::Numeric { mean, std: if std > 0.0 { std } else { 1.0 } })
        }
        SemanticType::Datetime => Some(AttrEncoder::Timestamp),
        SemanticType::Text => Some(AttrEncoder::Text { dim: text_dim }),
        SemanticType::Key | SemanticType::Ignored => None,
    }
}

fn timestamp_of(v: &Value) -> Option<i64> {
    match v {
        Value::Timestamp(t) => Some(*t),
        Value::Text(s) => parse_iso8601(s),
        Value::Integer(t) => Some(*t),
        _ => None,
    }
}

impl Encoders {
    /// Fits encoders from the semantic types recorded in the schema.
    pub fn fit(db: &Database, text: Option<&TextVectors>) -> Self {
        let text_dim = text.map_or(HASH_TEXT_DIM, |t| t.dim);
        let attrs = db
            .schema
            .relations
            .iter()
            .zip(&db.tables)
            .map(|(rel, table)| rel.attributes.iter().enumerate().map(|(c, a)| fit_attr(table, c, a.semantic, text_dim)).collect())
            .collect();
        Self { attrs }
    }

    pub fn get(&self, relation: usize, attr: usize) -> Option<&AttrEncoder> {
        self.attrs.get(relation)?.get(attr)?.as_ref()
    }

    /// Encodes one relation. Values outside a categorical vocabulary and nulls
    /// map to the sentinel or the masked flag.
    pub fn encode_table(&self, db: &Database, relation: usize, text: Option<&TextVectors>) -> Result<EncodedTable> {
        let rel = &db.schema.relations[relation];
        let table = &db.tables[relation];
        let n = table.len();
        let mut columns = Vec::with_capacity(rel.arity());
        for (c, attr) in rel.attributes.iter().enumerate() {
            let cells = table.rows.iter().map(|r| &r[c]);
            let data = match self.get(relation, c) {
                None => None,
                Some(AttrEncoder::Categorical { vocab }) => {
                    let index = cells.map(|v| vocab.binary_search(v).unwrap_or(vocab.len())).collect();
                    Some(ColumnData::Categorical { index, cardinality: vocab.len() })
                }
                Some(AttrEncoder::Numeric { mean, std }) => {
                    let mut value = Vec::with_capacity(n);
                    let mut masked = Vec::with_capacity(n);
                    for (r, v) in cells.enumerate() {
                        match v.as_f64() {
                            Some(x) if !x.is_finite() => {
                                return Err(Error::Numeric(alloc::format!("non-finite value in {}.{} row {r}", rel.name, attr.name)));
                            }
                            Some(x) => {
                                value.push((x - mean) / std);
                                masked.push(false);
                            }
                            None => {
                                value.push(0.0);
                                masked.push(true);
                            }
                        }
                    }
                    Some(ColumnData::Numeric { value, masked })
                }
                Some(AttrEncoder::Timestamp) => {
                    let mut features = Vec::with_capacity(n * TIME_FEATURES);
                    let mut masked = Vec::with_capacity(n);
                    for v in cells {
                        match timestamp_of(v) {
                            Some(ts) => {
                                features.extend_from_slice(&timestamp_features(ts));
                                masked.push(false);
                            }
                            None => {
                                features.extend_from_slice(&[0.0; TIME_FEATURES]);
                                masked.push(true);
                            }
                        }
                    }
                    Some(ColumnData::Timestamp { features, masked })
                }
                Some(AttrEncoder::Text { dim }) => {
                    let dim = *dim;
                    let mut vectors = Vec::with_capacity(n * dim);
                    let mut masked = Vec::with_capacity(n);
                    for (r, v) in cells.enumerate() {
                        let pre = text.filter(|t| t.dim == dim).and_then(|t| t.get(&rel.name, &attr.name, r));
                        match (v, pre) {
                            (Value::Null, _) => {
                                vectors.extend(core::iter::repeat_n(0.0, dim));
                                masked.push(true);
                            }
                            (_, Some(p)) => {
                                vectors.extend_from_slice(p);
                                masked.push(false);
                            }
                            (Value::Text(s), None) => {
                                vectors.extend(hash_text(s, dim));
                                masked.push(false);
                            }
                            (other, None) => {
                                let s = alloc::format!("{other:?}");
                                vectors.extend(hash_text(&s, dim));
                                masked.push(false);
                            }
                        }
                    }
                    Some(ColumnData::Text { vectors, dim, masked })
                }
            };
            columns.push(data);
        }
        Ok(EncodedTable { rows: n, columns })
    }

    pub fn encode(&self, db: &Database, text: Option<&TextVectors>) -> Result<Vec<EncodedTable>> {
        if db.schema.relations.len() != self.attrs.len()
            || db.schema.relations.iter().zip(&self.attrs).any(|(r, a)| r.arity() != a.len())
        {
            return Err(usage!("encoders were fitted on a different schema"));
        }
        (0..db.tables.len()).map(|r| self.encode_table(db, r, text)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datetime::parse_iso8601;

    #[test]
    fn timestamps_a_day_apart_share_clock_features() {
        let a = timestamp_features(parse_iso8601("2021-06-10T08:30:15").unwrap());
        let b = timestamp_features(parse_iso8601("2021-06-11T08:30:15").unwrap());
        assert_eq!(&a[6..12], &b[6..12]);
        assert_ne!(&a[4..6], &b[4..6]);
    }

    #[test]
    fn hashing_is_deterministic_and_normalized() {
        let a = hash_text("Red shipment", 64);
        assert_eq!(a, hash_text("red shipment", 64));
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_ne!(a, hash_text("blue shipment", 64));
        assert!(hash_text("", 64).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn categorical_unknowns_hit_the_sentinel() {
        let db = crate::relmodel::tests::parent_child_db();
        let det = crate::relmodel::detect_schema(&db);
        let db = Database::new(det.schema, db.tables).unwrap();
        let enc = Encoders::fit(&db, None);
        let tables = enc.encode(&db, None).unwrap();
        for (ri, t) in tables.iter().enumerate() {
            assert_eq!(t.rows, db.tables[ri].len());
            for (ci, c) in t.columns.iter().enumerate() {
                assert_eq!(c.is_some(), db.schema.relations[ri].attributes[ci].semantic.is_feature());
            }
        }
    }

    #[test]
    fn masking_sets_sentinels() {
        let mut t = EncodedTable {
            rows: 2,
            columns: vec![
                Some(ColumnData::Categorical { index: vec![0, 1], cardinality: 2 }),
                Some(ColumnData::Numeric { value: vec![0.5, -1.0], masked: vec![false, false] }),
                None,
            ],
        };
        t.mask_column(0).unwrap();
        t.mask_column(1).unwrap();
        assert!(t.mask_column(2).is_err());
        assert_eq!(t.columns[0], Some(ColumnData::Categorical { index: vec![2, 2], cardinality: 2 }));
        assert_eq!(t.columns[1], Some(ColumnData::Numeric { value: vec![0.0, 0.0], masked: vec![true, true] }));
    }
}
