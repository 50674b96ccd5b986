//! Per-attribute embedders turning rows into token matrices `[n, D]`.

mod embedder;
mod encode;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::relmodel::{Row, SchemaDef, SemanticType};
use crate::tensor::{Tape, Tensor};

pub use embedder::{Embedder, RelationEmbedder};
pub use encode::{hash_text, timestamp_features, AttrEncoder, ColumnData, EncodedTable, Encoders, TextVectors, HASH_TEXT_DIM, TIME_FEATURES};

/// Which attribute kinds are embedded. `Full` enables both text and time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Text,
    Time,
    Full,
}

impl Variant {
    pub fn uses_text(self) -> bool {
        matches!(self, Variant::Text | Variant::Full)
    }

    pub fn uses_time(self) -> bool {
        matches!(self, Variant::Time | Variant::Full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    CategoricalLookup,
    NumericLinear,
    NumericStack,
    Timestamp,
    TextTranscode,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericMode {
    Linear,
    Stack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub d_model: usize,
    pub variant: Variant,
    pub numeric_mode: NumericMode,
    /// Width `L` of incoming text vectors.
    pub text_dim: usize,
    /// Width `d` of the padded timestamp features, at least [`TIME_FEATURES`].
    pub time_dim: usize,
    /// Per-attribute overrides keyed `relation.attribute`.
    #[serde(default)]
    pub overrides: BTreeMap<String, EmbedMode>,
}

impl EmbedderSpec {
    pub fn new(d_model: usize, variant: Variant) -> Self {
        Self { d_model, variant, numeric_mode: NumericMode::Linear, text_dim: HASH_TEXT_DIM, time_dim: TIME_FEATURES, overrides: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::Spec("embedding dimension must be positive".into()));
        }
        if self.time_dim < TIME_FEATURES {
            return Err(Error::Spec(alloc::format!("timestamp dimension {} is below {TIME_FEATURES}", self.time_dim)));
        }
        if self.text_dim == 0 {
            return Err(Error::Spec("text dimension must be positive".into()));
        }
        Ok(())
    }

    /// The default mode for an attribute of the given semantic type.
    pub fn default_mode(&self, semantic: SemanticType) -> EmbedMode {
        match semantic {
            SemanticType::Categorical { .. } => EmbedMode::CategoricalLookup,
            SemanticType::Numeric => match self.numeric_mode {
                NumericMode::Linear => EmbedMode::NumericLinear,
                NumericMode::Stack => EmbedMode::NumericStack,
            },
            SemanticType::Datetime if self.variant.uses_time() => EmbedMode::Timestamp,
            SemanticType::Text if self.variant.uses_text() => EmbedMode::TextTranscode,
            _ => EmbedMode::Skip,
        }
    }

    /// Resolves the mode of every attribute; keys and ignored columns are always skipped.
    pub fn modes(&self, schema: &SchemaDef) -> Result<Vec<Vec<EmbedMode>>> {
        let mut out = Vec::with_capacity(schema.relations.len());
        for rel in &schema.relations {
            let mut modes = Vec::with_capacity(rel.arity());
            for a in &rel.attributes {
                let key = alloc::format!("{}.{}", rel.name, a.name);
                let mode = match self.overrides.get(&key) {
                    Some(_) if !a.semantic.is_feature() => EmbedMode::Skip,
                    Some(&m) => {
                        let fits = matches!(
                            (m, a.semantic),
                            (EmbedMode::Skip, _)
                                | (EmbedMode::CategoricalLookup, SemanticType::Categorical { .. })
                                | (EmbedMode::NumericLinear | EmbedMode::NumericStack, SemanticType::Numeric)
                                | (EmbedMode::Timestamp, SemanticType::Datetime)
                                | (EmbedMode::TextTranscode, SemanticType::Text)
                        );
                        if !fits {
                            return Err(Error::Spec(alloc::format!("mode {m:?} does not fit `{key}` of type {:?}", a.semantic)));
                        }
                        m
                    }
                    None => self.default_mode(a.semantic),
                };
                modes.push(mode);
            }
            out.push(modes);
        }
        for k in self.overrides.keys() {
            let found = k
                .split_once('.')
                .and_then(|(r, a)| schema.relation(r).and_then(|rel| rel.attr_index(a)))
                .is_some();
            if !found {
                return Err(Error::Spec(alloc::format!("override for unknown attribute `{k}`")));
            }
        }
        Ok(out)
    }
}

/// Embedded tokens of one row, one per embedded attribute in attribute order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Tensor,
    pub column_index: Vec<usize>,
}

/// Looks up row `index` of a `[cardinality + 1, D]` table.
pub fn embed_categorical(table: &Tensor, index: usize) -> Result<Tensor> {
    let rows = table.shape().first().copied().unwrap_or(0);
    if table.rank() != 2 || index >= rows {
        return Err(usage!("category index {index} outside table of shape {:?}", table.shape()));
    }
    Ok(Tensor::vector(table.row(index).to_vec()))
}

/// Linear mode: `w x + b`. Stack mode: `D` copies of `x`. Masked: `mask_vec`.
pub fn embed_numeric(x: f64, mode: NumericMode, masked: bool, w: &Tensor, b: &Tensor, mask_vec: &Tensor) -> Result<Tensor> {
    let d = mask_vec.len();
    if masked {
        return Ok(mask_vec.clone());
    }
    if !x.is_finite() {
        return Err(Error::Numeric(alloc::format!("non-finite numeric input {x}")));
    }
    match mode {
        NumericMode::Stack => Ok(Tensor::filled(&[d], x)),
        NumericMode::Linear => {
            if w.len() != d || b.len() != d {
                return Err(usage!("numeric embedder parameters of width {} and {} for D = {d}", w.len(), b.len()));
            }
            Ok(Tensor::vector(w.data().iter().zip(b.data()).map(|(wv, bv)| wv * x + bv).collect()))
        }
    }
}

fn affine(v: &[f64], w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(v.to_vec()));
    let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.matmul(x, wv).map_err(|e| usage!("{e}"))?;
    let y = tape.add_bias(y, bv).map_err(|e| usage!("{e}"))?;
    Ok(tape.value(y).clone())
}

/// Cyclic features, zero-padded to `w.shape()[0]`, then `· W + b`.
pub fn embed_timestamp(ts: i64, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = w.shape().first().copied().unwrap_or(0);
    if d < TIME_FEATURES {
        return Err(usage!("timestamp map needs at least {TIME_FEATURES} input rows, got {d}"));
    }
    let mut f = alloc::vec![0.0; d];
    f[..TIME_FEATURES].copy_from_slice(&timestamp_features(ts));
    affine(&f, w, b)
}

/// `v · W + b` with `W: [L, D]`.
pub fn transcode_text(v: &[f64], w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || w.shape()[0] != v.len() {
        return Err(usage!("text vector of length {} for a map of shape {:?}", v.len(), w.shape()));
    }
    affine(v, w, b)
}

/// Embeds a single row of `relation` with the model's encoders and parameters.
pub fn embed_row(
    row: &Row,
    relation: usize,
    schema: &SchemaDef,
    encoders: &Encoders,
    embedder: &Embedder,
    store: &crate::tensor::ParamStore,
) -> Result<TokenMatrix> {
    let rel = schema.relations.get(relation).ok_or_else(|| usage!("unknown relation {relation}"))?;
    let db = crate::relmodel::Database {
        schema: SchemaDef { relations: alloc::vec![rel.clone()] },
        tables: alloc::vec![crate::relmodel::Table::new(rel.arity(), alloc::vec![row.clone()])],
    };
    let single = Encoders { attrs: alloc::vec![encoders.attrs[relation].clone()] };
    let enc = single.encode_table(&db, 0, None)?;
    let mut tape = Tape::new();
    let re = &embedder.relations[relation];
    let t = re.embed(&mut tape, store, &enc)?;
    let n = tape.shape(t)[1];
    let d = tape.shape(t)[2];
    let tokens = tape.value(t).clone().reshaped(alloc::vec![n, d])?;
    Ok(TokenMatrix { tokens, column_index: re.columns().to_vec() })
}
