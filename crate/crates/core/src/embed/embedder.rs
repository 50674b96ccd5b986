use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{ColumnData, EmbedMode, EmbedderSpec, EncodedTable, Encoders, TIME_FEATURES};
use crate::error::{usage, Result};
use crate::relmodel::SchemaDef;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Lookup { attr: usize, table: ParamId },
    /// `[features·(1−m) | 1−m | m] · [W; b; mask]`. Stack mode has no `W`/`b`
    /// parameters and uses a constant row of ones instead.
    Affine { attr: usize, mode: EmbedMode, width: usize, w: Option<ParamId>, b: Option<ParamId>, mask: ParamId },
}

/// Embedding parameters of one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationEmbedder {
    tokens: Vec<Token>,
    columns: Vec<usize>,
    modes: Vec<EmbedMode>,
    positional: Option<ParamId>,
    /// Stands in for relations without embedded attributes.
    presence: Option<ParamId>,
    d_model: usize,
}

/// Embedding parameters of every relation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub spec: EmbedderSpec,
    pub relations: Vec<RelationEmbedder>,
}

impl Embedder {
    /// Registers all embedding parameters in `store`.
    pub fn new(spec: &EmbedderSpec, schema: &SchemaDef, encoders: &Encoders, store: &mut ParamStore, seed: u64) -> Result<Self> {
        spec.validate()?;
        let modes = spec.modes(schema)?;
        let d = spec.d_model;
        let mut relations = Vec::with_capacity(schema.relations.len());
        for (ri, rel) in schema.relations.iter().enumerate() {
            let mut tokens = Vec::new();
            let mut columns = Vec::new();
            let mut kinds = Vec::new();
            for (ai, attr) in rel.attributes.iter().enumerate() {
                let mode = modes[ri][ai];
                if mode == EmbedMode::Skip {
                    continue;
                }
                let p = format!("emb.{}.{}", rel.name, attr.name);
                let tok = match (mode, encoders.get(ri, ai)) {
                    (EmbedMode::CategoricalLookup, Some(super::AttrEncoder::Categorical { vocab })) => {
                        Token::Lookup { attr: ai, table: store.add_xavier(format!("{p}.table"), &[vocab.len() + 1, d], 1, d, seed)? }
                    }
                    (EmbedMode::NumericStack, Some(super::AttrEncoder::Numeric { .. })) => {
                        Token::Affine { attr: ai, mode, width: 1, w: None, b: None, mask: store.add_xavier(format!("{p}.mask"), &[1, d], 1, d, seed)? }
                    }
                    (EmbedMode::NumericLinear, Some(super::AttrEncoder::Numeric { .. })) => Token::Affine {
                        attr: ai,
                        mode,
                        width: 1,
                        w: Some(store.add_xavier(format!("{p}.w"), &[1, d], 1, d, seed)?),
                        b: Some(store.add_zeros(format!("{p}.b"), &[1, d])?),
                        mask: store.add_xavier(format!("{p}.mask"), &[1, d], 1, d, seed)?,
                    },
                    (EmbedMode::Timestamp, Some(super::AttrEncoder::Timestamp)) => Token::Affine {
                        attr: ai,
                        mode,
                        width: spec.time_dim,
                        w: Some(store.add_xavier(format!("{p}.w"), &[spec.time_dim, d], spec.time_dim, d, seed)?),
                        b: Some(store.add_zeros(format!("{p}.b"), &[1, d])?),
                        mask: store.add_xavier(format!("{p}.mask"), &[1, d], 1, d, seed)?,
                    },
                    (EmbedMode::TextTranscode, Some(super::AttrEncoder::Text { dim })) => Token::Affine {
                        attr: ai,
                        mode,
                        width: *dim,
                        w: Some(store.add_xavier(format!("{p}.w"), &[*dim, d], *dim, d, seed)?),
                        b: Some(store.add_zeros(format!("{p}.b"), &[1, d])?),
                        mask: store.add_xavier(format!("{p}.mask"), &[1, d], 1, d, seed)?,
                    },
                    (m, e) => return Err(usage!("no encoder fits mode {m:?} of `{}.{}` (encoder {e:?})", rel.name, attr.name)),
                };
                tokens.push(tok);
                columns.push(ai);
                kinds.push(mode);
            }
            let n = tokens.len();
            let (positional, presence) = if n == 0 {
                (None, Some(store.add_xavier(format!("emb.{}.presence", rel.name), &[1, d], 1, d, seed)?))
            } else {
                (Some(store.add_xavier(format!("emb.{}.pos", rel.name), &[n, d], 1, d, seed)?), None)
            };
            relations.push(RelationEmbedder { tokens, columns, modes: kinds, positional, presence, d_model: d });
        }
        Ok(Self { spec: spec.clone(), relations })
    }
}

impl RelationEmbedder {
    /// Attribute indices of the embedded columns, in token order.
    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// Mode of each token; empty when the relation uses a presence token.
    pub fn modes(&self) -> &[EmbedMode] {
        &self.modes
    }

    /// Number of tokens per row (at least 1).
    pub fn n_tokens(&self) -> usize {
        self.tokens.len().max(1)
    }

    /// Per-attribute tokens `[rows, D]` before positional terms.
    pub fn embed_raw(&self, tape: &mut Tape, store: &ParamStore, enc: &EncodedTable) -> Result<Vec<Var>> {
        let rows = enc.rows;
        let d = self.d_model;
        let mut out = Vec::with_capacity(self.tokens.len());
        for tok in &self.tokens {
            let v = match tok {
                Token::Lookup { attr, table } => {
                    let Some(Some(ColumnData::Categorical { index, .. })) = enc.columns.get(*attr) else {
                        return Err(usage!("attribute {attr} is not encoded as categorical"));
                    };
                    let t = tape.param(store, *table);
                    tape.gather(t, index)?
                }
                Token::Affine { attr, mode, width, w, b, mask } => {
                    let col = enc.columns.get(*attr).and_then(Option::as_ref);
                    let (feat, fw, masked): (&[f64], usize, &[bool]) = match (mode, col) {
                        (EmbedMode::NumericLinear | EmbedMode::NumericStack, Some(ColumnData::Numeric { value, masked })) => (value, 1, masked),
                        (EmbedMode::Timestamp, Some(ColumnData::Timestamp { features, masked })) => (features, TIME_FEATURES, masked),
                        (EmbedMode::TextTranscode, Some(ColumnData::Text { vectors, dim, masked })) if dim == width => (vectors, *dim, masked),
                        _ => return Err(usage!("attribute {attr} is not encoded for mode {mode:?}")),
                    };
                    let stack = *mode == EmbedMode::NumericStack;
                    let k = if stack { 2 } else { width + 2 };
                    let mut x = vec![0.0; rows * k];
                    for r in 0..rows {
                        let m = if masked[r] { 1.0 } else { 0.0 };
                        let row = &mut x[r * k..(r + 1) * k];
                        for c in 0..fw {
                            row[c] = feat[r * fw + c] * (1.0 - m);
                        }
                        if !stack {
                            row[k - 2] = 1.0 - m;
                        }
                        row[k - 1] = m;
                    }
                    let xv = tape.constant(Tensor::new(vec![rows, k], x)?);
                    let mv = tape.param(store, *mask);
                    let weight = match (w, b) {
                        (Some(w), Some(b)) => {
                            let (wv, bv) = (tape.param(store, *w), tape.param(store, *b));
                            tape.concat_rows(&[wv, bv, mv])?
                        }
                        _ => {
                            let ones = tape.constant(Tensor::filled(&[1, d], 1.0));
                            tape.concat_rows(&[ones, mv])?
                        }
                    };
                    tape.matmul(xv, weight)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Token tensor `[rows, n_tokens, D]` with positional vectors added.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, enc: &EncodedTable) -> Result<Var> {
        let rows = enc.rows;
        let d = self.d_model;
        if let Some(p) = self.presence {
            let ones = tape.constant(Tensor::filled(&[rows, 1], 1.0));
            let pv = tape.param(store, p);
            let t = tape.matmul(ones, pv)?;
            return tape.reshape(t, &[rows, 1, d]);
        }
        let raw = self.embed_raw(tape, store, enc)?;
        let n = raw.len();
        let flat = tape.concat_cols(&raw)?;
        let pos = tape.param(store, self.positional.expect("positional present when tokens exist"));
        let pos = tape.reshape(pos, &[n * d])?;
        let flat = tape.add_bias(flat, pos)?;
        tape.reshape(flat, &[rows, n, d])
    }
}
