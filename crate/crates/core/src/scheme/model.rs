use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::blocks::{
    AddMeanCombine, AttendAggregate, Attention, BatchNormRelu, BnSite, DecoderHead, CrossAttentionCombine, EncoderLayer, IdentityTransform, ResidualFnn, SageCombine,
    SumAggregate, TabTransform,
};
use super::{
    AggregateBlock, AggregateKind, ClosingBlock, ClosingKind, CombineBlock, CombineKind, Ctx, EdgeBatch, ModelSpec, Scope, TransformBlock, TransformKind,
};
use crate::embed::{EmbedMode, Embedder, Encoders};
use crate::error::{usage, Error, Result};
use crate::relmodel::SchemaDef;
use crate::sampler::MiniBatch;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug)]
struct Layer {
    transform: Vec<Box<dyn TransformBlock>>,
    combine: Vec<Box<dyn CombineBlock>>,
    aggregate: Vec<Box<dyn AggregateBlock>>,
    closing: Vec<Option<Box<dyn ClosingBlock>>>,
}

/// Block structure of a model; parameters live in a separate store.
#[derive(Debug)]
pub struct Network {
    pub spec: ModelSpec,
    pub target_relation: usize,
    pub embedder: Embedder,
    /// `(tokens, width)` of each relation's state after the post-embedding step.
    pub state_shapes: Vec<(usize, usize)>,
    /// `(source, target)` relation of each edge type id.
    pub edge_relations: Vec<(usize, usize)>,
    layers: Vec<Layer>,
    decoder: DecoderHead,
}

#[derive(Debug)]
pub struct Model {
    pub network: Network,
    pub store: ParamStore,
}

impl Model {
    /// Builds the blocks of `spec` for `schema` and initializes parameters from `seed`.
    pub fn new(spec: &ModelSpec, schema: &SchemaDef, encoders: &Encoders, target_relation: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if target_relation >= schema.relations.len() {
            return Err(Error::Spec(format!("unknown target relation {target_relation}")));
        }
        let mut store = ParamStore::new();
        let embedder = Embedder::new(&spec.embedder, schema, encoders, &mut store, seed)?;
        let d = spec.d_model;
        let state_shapes: Vec<(usize, usize)> = embedder
            .relations
            .iter()
            .map(|r| if spec.is_flat() { (1, r.n_tokens() * d) } else { (r.n_tokens(), d) })
            .collect();
        let mut edge_relations = Vec::new();
        for fk in schema.foreign_keys() {
            edge_relations.push((fk.source, fk.target));
            edge_relations.push((fk.target, fk.source));
        }
        let rel_name = |r: usize| schema.relations[r].name.as_str();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, ls) in spec.layers.iter().enumerate() {
            let mut transform: Vec<Box<dyn TransformBlock>> = Vec::new();
            let mut closing: Vec<Option<Box<dyn ClosingBlock>>> = Vec::new();
            for (r, &(_, w)) in state_shapes.iter().enumerate() {
                let p = format!("L{l}.{}", rel_name(r));
                transform.push(match ls.transform {
                    TransformKind::Identity => Box::new(IdentityTransform),
                    TransformKind::TransformerEncoder => Box::new(EncoderLayer::new(&mut store, seed, &format!("{p}.enc"), d, spec.heads)?),
                    TransformKind::BatchNormRelu => Box::new(BatchNormRelu { bn: BnSite::new(&mut store, &format!("{p}.bn"), w)? }),
                    TransformKind::TabEncoder => {
                        let modes = embedder.relations[r].modes();
                        let numeric: Vec<bool> = if modes.is_empty() { vec![false] } else { modes.iter().map(|&m| m == EmbedMode::NumericStack).collect() };
                        Box::new(TabTransform::new(&mut store, seed, &format!("{p}.tab"), d, spec.heads, &numeric)?)
                    }
                });
                closing.push(match ls.closing {
                    ClosingKind::None => None,
                    ClosingKind::ResidualFnn => Some(Box::new(ResidualFnn::new(&mut store, seed, &format!("{p}.close"), w)?)),
                });
            }
            let mut combine: Vec<Box<dyn CombineBlock>> = Vec::new();
            let mut aggregate: Vec<Box<dyn AggregateBlock>> = Vec::new();
            for (et, &(s, t)) in edge_relations.iter().enumerate() {
                let p = format!("L{l}.e{et}");
                combine.push(match ls.combine {
                    CombineKind::CrossAttention => {
                        Box::new(CrossAttentionCombine { attn: Attention::new(&mut store, seed, &format!("{p}.xattn"), d, spec.heads)? })
                    }
                    CombineKind::Sage => Box::new(SageCombine::new(&mut store, seed, &format!("{p}.sage"), state_shapes[s].1, state_shapes[t].1)?),
                    CombineKind::AddMean => Box::new(AddMeanCombine),
                });
                aggregate.push(match ls.aggregate {
                    AggregateKind::Attention => Box::new(AttendAggregate::new(&mut store, seed, &format!("{p}.agg"), state_shapes[s].1)?),
                    AggregateKind::Sum => Box::new(SumAggregate),
                });
            }
            layers.push(Layer { transform, combine, aggregate, closing });
        }
        let (n, w) = state_shapes[target_relation];
        let decoder = DecoderHead::new(&mut store, seed, "dec", n * w, &spec.decoder)?;
        let network = Network {
            spec: spec.clone(),
            target_relation,
            embedder,
            state_shapes,
            edge_relations,
            layers,
            decoder,
        };
        Ok(Self { network, store })
    }

    /// Records the forward pass and returns logits `[seeds, outputs]`.
    pub fn logits(&mut self, tape: &mut Tape, batch: &MiniBatch, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let Model { network, store } = self;
        let mut ctx = Ctx { tape, store, training, dropout: network.spec.dropout, rng };
        network.logits(&mut ctx, batch)
    }

    /// Final target-relation states of the seeds, `[seeds, tokens, width]`, evaluation mode.
    pub fn forward_batch(&mut self, batch: &MiniBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let Model { network, store } = self;
        let mut ctx = Ctx { tape: &mut tape, store, training: false, dropout: 0.0, rng: &mut rng };
        let v = network.seed_states(&mut ctx, batch)?;
        Ok(tape.value(v).clone())
    }

    /// Logits in evaluation mode.
    pub fn predict(&mut self, batch: &MiniBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let v = self.logits(&mut tape, batch, false, &mut rng)?;
        Ok(tape.value(v).clone())
    }
}

impl Network {
    /// Embeds, runs every layer over all relations of the batch, and returns
    /// the seed rows of the target relation.
    pub fn seed_states(&self, ctx: &mut Ctx, batch: &MiniBatch) -> Result<Var> {
        if !batch.label_mask_applied {
            return Err(usage!("forward on a batch whose targets are not masked"));
        }
        if batch.target_relation != self.target_relation {
            return Err(usage!("batch targets relation {}, model relation {}", batch.target_relation, self.target_relation));
        }
        let nrel = self.state_shapes.len();
        if batch.features.len() != nrel || batch.edges.len() != self.edge_relations.len() {
            return Err(usage!("batch does not match the model schema"));
        }
        let mut h: Vec<Option<Var>> = vec![None; nrel];
        for r in 0..nrel {
            let rows = batch.features[r].rows;
            if rows == 0 || (self.spec.scope == Scope::TargetOnly && r != self.target_relation) {
                continue;
            }
            let x = self.embedder.relations[r].embed(ctx.tape, ctx.store, &batch.features[r])?;
            let (n, w) = self.state_shapes[r];
            h[r] = Some(ctx.tape.reshape(x, &[rows, n, w])?);
        }
        for layer in &self.layers {
            let mut t: Vec<Option<Var>> = vec![None; nrel];
            for r in 0..nrel {
                if let Some(x) = h[r] {
                    t[r] = Some(layer.transform[r].forward(ctx, x)?);
                }
            }
            for r in 0..nrel {
                let Some(tr) = t[r] else { continue };
                let rows = batch.features[r].rows;
                let mut acc: Option<Var> = None;
                for (et, le) in batch.edges.iter().enumerate() {
                    if le.source_relation != r || le.pairs.is_empty() {
                        continue;
                    }
                    let tj = t[le.target_relation].ok_or_else(|| usage!("edge type {et} points into an empty relation"))?;
                    let src: Vec<usize> = le.pairs.iter().map(|p| p.0).collect();
                    let dst: Vec<usize> = le.pairs.iter().map(|p| p.1).collect();
                    let eb = EdgeBatch::new(&src, &dst, rows);
                    let ci = ctx.tape.gather(tr, &src)?;
                    let nj = ctx.tape.gather(tj, &dst)?;
                    let msg = layer.combine[et].forward(ctx, ci, nj, &eb)?;
                    let a = layer.aggregate[et].forward(ctx, tr, msg, &eb)?;
                    acc = Some(match acc {
                        Some(prev) => ctx.tape.add(prev, a)?,
                        None => a,
                    });
                }
                let m = match acc {
                    Some(m) => m,
                    None => {
                        let shape = ctx.tape.shape(tr).to_vec();
                        ctx.tape.constant(Tensor::zeros(&shape))
                    }
                };
                h[r] = Some(match &layer.closing[r] {
                    Some(c) => c.forward(ctx, tr, m)?,
                    None => m,
                });
            }
        }
        let target = h[self.target_relation].ok_or_else(|| usage!("batch has no target rows"))?;
        ctx.tape.gather(target, &batch.seed_local)
    }

    /// Decoder output `[seeds, outputs]`.
    pub fn logits(&self, ctx: &mut Ctx, batch: &MiniBatch) -> Result<Var> {
        let s = self.seed_states(ctx, batch)?;
        self.decoder.forward(ctx, s)
    }
}
