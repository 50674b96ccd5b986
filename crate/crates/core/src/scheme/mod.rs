//! Two-level relational message passing: block interfaces, concrete blocks
//! and the named model assemblies.

mod blocks;
mod model;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Debug;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbedderSpec, NumericMode, Variant};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

pub use blocks::{
    add_mean_combine, attend_aggregate, concat_attributes, decoder_head, cross_attention_combine, residual_fnn_combine, sage_combine, self_attention, sum_aggregate,
    transformer_encoder_layer, AddMeanCombine, AttendAggregate, Attention, BatchNormRelu, BnSite, CrossAttentionCombine, DecoderHead, EncoderLayer, Ffn, LayerNormP,
    IdentityTransform, ResidualFnn, SageCombine, SumAggregate, TabTransform,
};
pub use model::{Model, Network};

/// Everything a block needs while recording a forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub training: bool,
    /// Dropout rate on attention probabilities; only active while training.
    pub dropout: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Ctx<'_> {
    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Local edges of one edge type: message `e` goes from `dst[e]` to center row `src[e]`.
#[derive(Debug, Clone)]
pub struct EdgeBatch<'a> {
    pub src: &'a [usize],
    pub dst: &'a [usize],
    pub n_center: usize,
    /// `1 / deg(src[e])` per edge, degree counted within this edge type.
    pub inv_degree: Vec<f64>,
}

impl<'a> EdgeBatch<'a> {
    pub fn new(src: &'a [usize], dst: &'a [usize], n_center: usize) -> Self {
        let mut deg = alloc::vec![0usize; n_center];
        src.iter().for_each(|&s| deg[s] += 1);
        let inv_degree = src.iter().map(|&s| 1.0 / deg[s] as f64).collect();
        Self { src, dst, n_center, inv_degree }
    }
}

/// Token state to token state of the same relation (1:1).
pub trait TransformBlock: Debug + Send + Sync {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var>;
}

/// Combines gathered center states `[E, n_i, W]` with neighbor states `[E, n_j, W']`
/// into one message per edge, shaped like the center.
pub trait CombineBlock: Debug + Send + Sync {
    fn forward(&self, ctx: &mut Ctx, center: Var, neighbor: Var, edges: &EdgeBatch) -> Result<Var>;
}

/// Reduces the messages of each center row to one state. Must be invariant
/// under permutation of the messages of a row.
pub trait AggregateBlock: Debug + Send + Sync {
    fn forward(&self, ctx: &mut Ctx, center: Var, messages: Var, edges: &EdgeBatch) -> Result<Var>;
}

/// Merges the transformed state with the cross-FK aggregate.
pub trait ClosingBlock: Debug + Send + Sync {
    fn forward(&self, ctx: &mut Ctx, h: Var, m: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    TransformerEncoder,
    BatchNormRelu,
    /// Encoder over categorical tokens, layer norm over stack-embedded numeric tokens.
    TabEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineKind {
    CrossAttention,
    Sage,
    AddMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateKind {
    Attention,
    Sum,
}

/// Reduction over the per-edge-type aggregates of a relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAggregateKind {
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosingKind {
    None,
    ResidualFnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostEmbed {
    /// Positional vectors added by the embedder only.
    None,
    ConcatAttributes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Database,
    TargetOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub transform: TransformKind,
    pub combine: CombineKind,
    pub aggregate: AggregateKind,
    pub cross_aggregate: CrossAggregateKind,
    pub closing: ClosingKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    /// Number of linear layers, at least 1.
    pub layers: usize,
    pub hidden: usize,
    pub batch_norm: bool,
    pub outputs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assembly {
    Dbformer,
    Dbgnn,
    DbTabtransformer,
    TabularFnn,
}

impl Assembly {
    pub const ALL: [Assembly; 4] = [Assembly::Dbformer, Assembly::Dbgnn, Assembly::DbTabtransformer, Assembly::TabularFnn];

    pub fn name(self) -> &'static str {
        match self {
            Assembly::Dbformer => "dbformer",
            Assembly::Dbgnn => "dbgnn",
            Assembly::DbTabtransformer => "db_tabtransformer",
            Assembly::TabularFnn => "tabular_fnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::Spec(alloc::format!("unknown model `{s}`")))
    }
}

/// Declarative model description; serializes to a text document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub embedder: EmbedderSpec,
    pub post_embed: PostEmbed,
    pub scope: Scope,
    pub layers: Vec<LayerSpec>,
    pub decoder: DecoderSpec,
}

impl ModelSpec {
    /// One of the named assemblies with `n_layers` layers.
    pub fn assembly(kind: Assembly, d_model: usize, n_layers: usize, heads: usize, variant: Variant, decoder: DecoderSpec) -> Self {
        let mut embedder = EmbedderSpec::new(d_model, variant);
        let layer = |transform, combine, aggregate, closing| LayerSpec { transform, combine, aggregate, cross_aggregate: CrossAggregateKind::Sum, closing };
        let (post_embed, scope, l) = match kind {
            Assembly::Dbformer => (
                PostEmbed::None,
                Scope::Database,
                Some(layer(TransformKind::TransformerEncoder, CombineKind::CrossAttention, AggregateKind::Attention, ClosingKind::ResidualFnn)),
            ),
            Assembly::Dbgnn => {
                (PostEmbed::ConcatAttributes, Scope::Database, Some(layer(TransformKind::BatchNormRelu, CombineKind::Sage, AggregateKind::Sum, ClosingKind::None)))
            }
            Assembly::DbTabtransformer => {
                embedder.numeric_mode = NumericMode::Stack;
                (PostEmbed::None, Scope::Database, Some(layer(TransformKind::TabEncoder, CombineKind::AddMean, AggregateKind::Sum, ClosingKind::None)))
            }
            Assembly::TabularFnn => (PostEmbed::ConcatAttributes, Scope::TargetOnly, None),
        };
        Self {
            name: String::from(kind.name()),
            d_model,
            heads,
            dropout: 0.0,
            embedder,
            post_embed,
            scope,
            layers: l.map_or_else(Vec::new, |l| alloc::vec![l; n_layers]),
            decoder,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.post_embed == PostEmbed::ConcatAttributes
    }

    /// Checks that the block choices compose.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.embedder.d_model != self.d_model {
            return err(alloc::format!("embedder width {} differs from model width {}", self.embedder.d_model, self.d_model));
        }
        self.embedder.validate().map_err(|e| Error::Spec(alloc::format!("{e}")))?;
        if !(0.0..1.0).contains(&self.dropout) {
            return err(alloc::format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.decoder.layers == 0 || self.decoder.outputs == 0 || self.decoder.hidden == 0 {
            return err(String::from("decoder needs at least one layer, one output and a positive hidden width"));
        }
        match self.scope {
            Scope::TargetOnly if !self.layers.is_empty() => return err(String::from("a target-only model has no message-passing layers")),
            Scope::Database if self.layers.is_empty() => return err(String::from("at least one layer is required")),
            _ => {}
        }
        let attention = self.layers.iter().any(|l| {
            matches!(l.transform, TransformKind::TransformerEncoder | TransformKind::TabEncoder) || l.combine == CombineKind::CrossAttention
        });
        if attention && (self.heads == 0 || !self.d_model.is_multiple_of(self.heads)) {
            return err(alloc::format!("width {} is not divisible by {} heads", self.d_model, self.heads));
        }
        let flat = self.is_flat();
        for (i, l) in self.layers.iter().enumerate() {
            let token_only = matches!(l.transform, TransformKind::TransformerEncoder | TransformKind::TabEncoder) || l.combine == CombineKind::CrossAttention;
            if flat && token_only {
                return err(alloc::format!("layer {i} needs attribute tokens but attributes are concatenated"));
            }
            if !flat && l.combine == CombineKind::Sage {
                return err(alloc::format!("layer {i}: sage combine needs concatenated attributes"));
            }
            if l.transform == TransformKind::TabEncoder && self.embedder.numeric_mode != NumericMode::Stack {
                return err(alloc::format!("layer {i}: tab encoder needs stack-embedded numerics"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests;
