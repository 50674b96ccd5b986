use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AggregateBlock, ClosingBlock, CombineBlock, Ctx, DecoderSpec, EdgeBatch, TransformBlock};
use crate::error::{usage, Result};
use crate::tensor::{ffn, linear, ParamId, ParamStore, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM, LN_EPS};

fn xavier(store: &mut ParamStore, seed: u64, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
    store.add_xavier(name, &[rows, cols], rows, cols, seed)
}

fn dims3(tape: &Tape, x: Var, what: &str) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(usage!("{what} expects a [rows, tokens, width] state, got {s:?}")),
    }
}

fn dropout(ctx: &mut Ctx, x: Var) -> Result<Var> {
    if !ctx.training || ctx.dropout == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - ctx.dropout;
    let shape = ctx.tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n).map(|_| if ctx.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let m = ctx.tape.constant(Tensor::new(shape, mask)?);
    ctx.tape.mul(x, m)
}

/// Multi-head scaled dot-product attention without projection biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(usage!("width {d} is not divisible by {heads} heads"));
        }
        let mut w = |n: &str| xavier(store, seed, &format!("{prefix}.{n}"), d, d);
        Ok(Self { wq: w("wq")?, wk: w("wk")?, wv: w("wv")?, wo: w("wo")?, heads, d })
    }

    fn split(&self, tape: &mut Tape, x: Var, b: usize, n: usize) -> Result<Var> {
        let (h, dk) = (self.heads, self.d / self.heads);
        let x = tape.reshape(x, &[b, n, h, dk])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * h, n, dk])
    }

    /// Queries from `q_in [B, nq, D]`, keys and values from `kv_in [B, nk, D]`.
    pub fn forward(&self, ctx: &mut Ctx, q_in: Var, kv_in: Var) -> Result<Var> {
        let [b, nq, dq] = dims3(ctx.tape, q_in, "attention")?;
        let [b2, nk, dkv] = dims3(ctx.tape, kv_in, "attention")?;
        if b != b2 || dq != self.d || dkv != self.d {
            return Err(usage!("attention over {:?} and {:?} with width {}", ctx.tape.shape(q_in), ctx.tape.shape(kv_in), self.d));
        }
        let dk = self.d / self.heads;
        let (wq, wk, wv, wo) = (ctx.p(self.wq), ctx.p(self.wk), ctx.p(self.wv), ctx.p(self.wo));
        let q = ctx.tape.matmul(q_in, wq)?;
        let k = ctx.tape.matmul(kv_in, wk)?;
        let v = ctx.tape.matmul(kv_in, wv)?;
        let q = self.split(ctx.tape, q, b, nq)?;
        let k = self.split(ctx.tape, k, b, nk)?;
        let v = self.split(ctx.tape, v, b, nk)?;
        let s = ctx.tape.batch_matmul(q, k, true)?;
        let s = ctx.tape.scale(s, 1.0 / libm::sqrt(dk as f64))?;
        let p = ctx.tape.softmax(s)?;
        let p = dropout(ctx, p)?;
        let o = ctx.tape.batch_matmul(p, v, false)?;
        let o = ctx.tape.reshape(o, &[b, self.heads, nq, dk])?;
        let o = ctx.tape.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.tape.reshape(o, &[b, nq, self.d])?;
        ctx.tape.matmul(o, wo)
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormP {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormP {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self { gain: store.add_ones(format!("{prefix}.g"), &[width])?, bias: store.add_zeros(format!("{prefix}.b"), &[width])? })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Position-wise two-layer feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: xavier(store, seed, &format!("{prefix}.w1"), width, hidden)?,
            b1: store.add_zeros(format!("{prefix}.b1"), &[hidden])?,
            w2: xavier(store, seed, &format!("{prefix}.w2"), hidden, width)?,
            b2: store.add_zeros(format!("{prefix}.b2"), &[width])?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (ctx.p(self.w1), ctx.p(self.b1), ctx.p(self.w2), ctx.p(self.b2));
        ffn(ctx.tape, x, w1, b1, w2, b2)
    }
}

/// `X1 = LN(X + SelfAttn(X))`, `X' = LN(X1 + FFN(X1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln1: LayerNormP,
    pub ffn: Ffn,
    pub ln2: LayerNormP,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(store, seed, &format!("{prefix}.attn"), d, heads)?,
            ln1: LayerNormP::new(store, &format!("{prefix}.ln1"), d)?,
            ffn: Ffn::new(store, seed, &format!("{prefix}.ffn"), d, 2 * d)?,
            ln2: LayerNormP::new(store, &format!("{prefix}.ln2"), d)?,
        })
    }
}

impl TransformBlock for EncoderLayer {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let a = self.attn.forward(ctx, x, x)?;
        let x1 = ctx.tape.add(x, a)?;
        let x1 = self.ln1.forward(ctx, x1)?;
        let f = self.ffn.forward(ctx, x1)?;
        let x2 = ctx.tape.add(x1, f)?;
        self.ln2.forward(ctx, x2)
    }
}

/// Queries from the referencing tuple, keys and values from the referenced one.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionCombine {
    pub attn: Attention,
}

impl CombineBlock for CrossAttentionCombine {
    fn forward(&self, ctx: &mut Ctx, center: Var, neighbor: Var, _edges: &EdgeBatch) -> Result<Var> {
        self.attn.forward(ctx, center, neighbor)
    }
}

/// Per token position, softmax over the messages of a center row of
/// `<center·Wq, msg·Wk> / sqrt(W)`, weighting `msg·Wv`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendAggregate {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttendAggregate {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, width: usize) -> Result<Self> {
        let mut w = |n: &str| xavier(store, seed, &format!("{prefix}.{n}"), width, width);
        Ok(Self { wq: w("wq")?, wk: w("wk")?, wv: w("wv")? })
    }
}

fn check_messages(tape: &Tape, center: Var, messages: Var, edges: &EdgeBatch) -> Result<()> {
    let (c, m) = (tape.shape(center), tape.shape(messages));
    if c.len() != m.len() || c.is_empty() || c[1..] != m[1..] || m[0] != edges.src.len() || c[0] != edges.n_center {
        return Err(usage!("messages {m:?} do not fit center {c:?} with {} edges", edges.src.len()));
    }
    Ok(())
}

impl AggregateBlock for AttendAggregate {
    fn forward(&self, ctx: &mut Ctx, center: Var, messages: Var, edges: &EdgeBatch) -> Result<Var> {
        check_messages(ctx.tape, center, messages, edges)?;
        let width = ctx.tape.value(center).last_dim();
        let (wq, wk, wv) = (ctx.p(self.wq), ctx.p(self.wk), ctx.p(self.wv));
        let q = ctx.tape.matmul(center, wq)?;
        let q = ctx.tape.gather(q, edges.src)?;
        let k = ctx.tape.matmul(messages, wk)?;
        let v = ctx.tape.matmul(messages, wv)?;
        let s = ctx.tape.mul(q, k)?;
        let s = ctx.tape.sum_last(s)?;
        let s = ctx.tape.scale(s, 1.0 / libm::sqrt(width as f64))?;
        let a = ctx.tape.segment_softmax(s, edges.src)?;
        let v = ctx.tape.scale_rows(v, a)?;
        ctx.tape.scatter_add(v, edges.src, edges.n_center)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SumAggregate;

impl AggregateBlock for SumAggregate {
    fn forward(&self, ctx: &mut Ctx, center: Var, messages: Var, edges: &EdgeBatch) -> Result<Var> {
        check_messages(ctx.tape, center, messages, edges)?;
        ctx.tape.scatter_add(messages, edges.src, edges.n_center)
    }
}

/// `u = LN(h + m)`, `out = LN(u + FFN(u))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFnn {
    pub ln1: LayerNormP,
    pub ffn: Ffn,
    pub ln2: LayerNormP,
}

impl ResidualFnn {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNormP::new(store, &format!("{prefix}.ln1"), width)?,
            ffn: Ffn::new(store, seed, &format!("{prefix}.ffn"), width, 2 * width)?,
            ln2: LayerNormP::new(store, &format!("{prefix}.ln2"), width)?,
        })
    }
}

impl ClosingBlock for ResidualFnn {
    fn forward(&self, ctx: &mut Ctx, h: Var, m: Var) -> Result<Var> {
        if ctx.tape.shape(h) != ctx.tape.shape(m) {
            return Err(usage!("closing over {:?} and {:?}", ctx.tape.shape(h), ctx.tape.shape(m)));
        }
        let u = ctx.tape.add(h, m)?;
        let u = self.ln1.forward(ctx, u)?;
        let f = self.ffn.forward(ctx, u)?;
        let o = ctx.tape.add(u, f)?;
        self.ln2.forward(ctx, o)
    }
}

/// `t_i + mean over the tokens of t_j`, broadcast over the tokens of `t_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddMeanCombine;

impl CombineBlock for AddMeanCombine {
    fn forward(&self, ctx: &mut Ctx, center: Var, neighbor: Var, _edges: &EdgeBatch) -> Result<Var> {
        let [e, ni, d] = dims3(ctx.tape, center, "add_mean_combine")?;
        let [e2, _, d2] = dims3(ctx.tape, neighbor, "add_mean_combine")?;
        if e != e2 || d != d2 {
            return Err(usage!("add_mean_combine over {:?} and {:?}", ctx.tape.shape(center), ctx.tape.shape(neighbor)));
        }
        let m = ctx.tape.mean_middle(neighbor)?;
        let m = ctx.tape.broadcast_middle(m, ni)?;
        ctx.tape.add(center, m)
    }
}

/// `(W_self·t_i + W_fk·t_j) / deg_i` on flattened states.
#[derive(Debug, Clone, PartialEq)]
pub struct SageCombine {
    pub w_self: ParamId,
    pub w_fk: ParamId,
}

impl SageCombine {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, width_i: usize, width_j: usize) -> Result<Self> {
        Ok(Self {
            w_self: xavier(store, seed, &format!("{prefix}.w_self"), width_i, width_i)?,
            w_fk: xavier(store, seed, &format!("{prefix}.w_fk"), width_j, width_i)?,
        })
    }
}

impl CombineBlock for SageCombine {
    fn forward(&self, ctx: &mut Ctx, center: Var, neighbor: Var, edges: &EdgeBatch) -> Result<Var> {
        let [e, n, _] = dims3(ctx.tape, center, "sage_combine")?;
        if e != edges.inv_degree.len() {
            return Err(usage!("sage_combine over {e} rows with {} edges", edges.inv_degree.len()));
        }
        let (ws, wf) = (ctx.p(self.w_self), ctx.p(self.w_fk));
        let a = ctx.tape.matmul(center, ws)?;
        let b = ctx.tape.matmul(neighbor, wf)?;
        let s = ctx.tape.add(a, b)?;
        let w: Vec<f64> = edges.inv_degree.iter().flat_map(|&v| core::iter::repeat_n(v, n)).collect();
        let w = ctx.tape.constant(Tensor::new(vec![e, n], w)?);
        ctx.tape.scale_rows(s, w)
    }
}

/// Batch norm whose running statistics live in the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct BnSite {
    pub gain: ParamId,
    pub bias: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BnSite {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_ones(format!("{prefix}.g"), &[width])?,
            bias: store.add_zeros(format!("{prefix}.b"), &[width])?,
            mean: store.add_state(format!("{prefix}.running_mean"), Tensor::zeros(&[width]))?,
            var: store.add_state(format!("{prefix}.running_var"), Tensor::filled(&[width], 1.0))?,
        })
    }

    /// Normalizes columns of `x [rows, F]`. Batch statistics are used while
    /// training with at least two rows, running statistics otherwise.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        let rows = ctx.tape.value(x).len() / ctx.tape.value(x).last_dim().max(1);
        if ctx.training && rows >= 2 {
            let (y, mean, var) = ctx.tape.batch_norm(x, g, b, None, BN_EPS)?;
            let unbias = rows as f64 / (rows as f64 - 1.0);
            let rm = ctx.store.get_mut(self.mean).value.data_mut();
            rm.iter_mut().zip(&mean).for_each(|(r, m)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            let rv = ctx.store.get_mut(self.var).value.data_mut();
            rv.iter_mut().zip(&var).for_each(|(r, v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias);
            Ok(y)
        } else {
            let mean = ctx.store.get(self.mean).value.data().to_vec();
            let var = ctx.store.get(self.var).value.data().to_vec();
            Ok(ctx.tape.batch_norm(x, g, b, Some((&mean, &var)), BN_EPS)?.0)
        }
    }
}

/// Batch norm then ReLU on flattened states `[rows, 1, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormRelu {
    pub bn: BnSite,
}

impl TransformBlock for BatchNormRelu {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let f = *shape.last().ok_or_else(|| usage!("batch norm on a scalar"))?;
        let rows = shape.iter().product::<usize>() / f.max(1);
        let flat = ctx.tape.reshape(x, &[rows, f])?;
        let y = self.bn.forward(ctx, flat)?;
        let y = ctx.tape.relu(y)?;
        ctx.tape.reshape(y, &shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityTransform;

impl TransformBlock for IdentityTransform {
    fn forward(&self, _ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Encoder over the categorical (non-numeric) tokens of a relation, layer
/// norm across the stack-embedded numeric tokens; token order is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TabTransform {
    pub encoder: Option<EncoderLayer>,
    /// Normalizes over the numeric attributes, per embedding coordinate.
    pub numeric_ln: Option<LayerNormP>,
    pub categorical: Vec<usize>,
    pub numeric: Vec<usize>,
}

impl TabTransform {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, d: usize, heads: usize, numeric_tokens: &[bool]) -> Result<Self> {
        let categorical: Vec<usize> = (0..numeric_tokens.len()).filter(|&i| !numeric_tokens[i]).collect();
        let numeric: Vec<usize> = (0..numeric_tokens.len()).filter(|&i| numeric_tokens[i]).collect();
        let encoder = if categorical.is_empty() { None } else { Some(EncoderLayer::new(store, seed, &format!("{prefix}.enc"), d, heads)?) };
        let numeric_ln = if numeric.len() < 2 { None } else { Some(LayerNormP::new(store, &format!("{prefix}.num_ln"), numeric.len())?) };
        Ok(Self { encoder, numeric_ln, categorical, numeric })
    }
}

impl TransformBlock for TabTransform {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let [_, n, _] = dims3(ctx.tape, x, "tab transform")?;
        if n != self.categorical.len() + self.numeric.len() {
            return Err(usage!("tab transform built for {} tokens, got {n}", self.categorical.len() + self.numeric.len()));
        }
        let xt = ctx.tape.permute(x, &[1, 0, 2])?;
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(n);
        if let Some(enc) = &self.encoder {
            let c = ctx.tape.gather(xt, &self.categorical)?;
            let c = ctx.tape.permute(c, &[1, 0, 2])?;
            let c = enc.forward(ctx, c)?;
            parts.push(ctx.tape.permute(c, &[1, 0, 2])?);
            order.extend_from_slice(&self.categorical);
        }
        if !self.numeric.is_empty() {
            let u = ctx.tape.gather(xt, &self.numeric)?;
            let u = match &self.numeric_ln {
                Some(ln) => {
                    let u = ctx.tape.permute(u, &[1, 2, 0])?;
                    let u = ln.forward(ctx, u)?;
                    ctx.tape.permute(u, &[2, 0, 1])?
                }
                None => u,
            };
            parts.push(u);
            order.extend_from_slice(&self.numeric);
        }
        let all = ctx.tape.concat_rows(&parts)?;
        let mut inverse = vec![0; n];
        order.iter().enumerate().for_each(|(pos, &tok)| inverse[tok] = pos);
        let all = ctx.tape.gather(all, &inverse)?;
        ctx.tape.permute(all, &[1, 0, 2])
    }
}

/// Flattens the seed states, then `M - 1` hidden layers of linear, ReLU and
/// optional batch norm, then a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    pub hidden: Vec<(ParamId, ParamId, Option<BnSite>)>,
    pub w: ParamId,
    pub b: ParamId,
    pub in_width: usize,
}

impl DecoderHead {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, in_width: usize, spec: &DecoderSpec) -> Result<Self> {
        if spec.layers == 0 || spec.outputs == 0 {
            return Err(usage!("decoder needs at least one layer and one output"));
        }
        let mut width = in_width;
        let mut hidden = Vec::new();
        for i in 0..spec.layers - 1 {
            let w = xavier(store, seed, &format!("{prefix}.{i}.w"), width, spec.hidden)?;
            let b = store.add_zeros(format!("{prefix}.{i}.b"), &[spec.hidden])?;
            let bn = if spec.batch_norm { Some(BnSite::new(store, &format!("{prefix}.{i}.bn"), spec.hidden)?) } else { None };
            hidden.push((w, b, bn));
            width = spec.hidden;
        }
        let i = spec.layers - 1;
        let w = xavier(store, seed, &format!("{prefix}.{i}.w"), width, spec.outputs)?;
        let b = store.add_zeros(format!("{prefix}.{i}.b"), &[spec.outputs])?;
        Ok(Self { hidden, w, b, in_width })
    }

    /// `x [B, ...]` with `in_width` values per row to `[B, outputs]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        let rows = *shape.first().ok_or_else(|| usage!("decoder input is a scalar"))?;
        let width: usize = shape[1..].iter().product();
        if width != self.in_width {
            return Err(usage!("decoder built for width {}, got state {shape:?}", self.in_width));
        }
        let mut x = ctx.tape.reshape(x, &[rows, width])?;
        for (w, b, bn) in &self.hidden {
            x = linear(ctx.tape, ctx.store, x, *w, Some(*b))?;
            x = ctx.tape.relu(x)?;
            if let Some(bn) = bn {
                x = bn.forward(ctx, x)?;
            }
        }
        linear(ctx.tape, ctx.store, x, self.w, Some(self.b))
    }
}

/// Decoder output for `state` with parameters from `store`.
pub fn decoder_head(store: &mut ParamStore, head: &DecoderHead, state: &Tensor, training: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx { tape: &mut tape, store, training, dropout: 0.0, rng: &mut rng };
    let x = ctx.tape.constant(state.clone());
    let y = head.forward(&mut ctx, x)?;
    Ok(tape.value(y).clone())
}

/// Runs `f` in evaluation mode and returns the value it produces.
fn eval_with(store: &mut ParamStore, f: impl FnOnce(&mut Ctx) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx { tape: &mut tape, store, training: false, dropout: 0.0, rng: &mut rng };
    let v = f(&mut ctx)?;
    Ok(tape.value(v).clone())
}

fn rank2(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(usage!("{what} expects an [n, D] token matrix, got {s:?}")),
    }
}

fn attention_store(d: usize, heads: usize, w: [&Tensor; 4]) -> Result<(ParamStore, Attention)> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(usage!("width {d} is not divisible by {heads} heads"));
    }
    let mut store = ParamStore::new();
    let mut ids = [ParamId(0); 4];
    for (i, (n, t)) in ["wq", "wk", "wv", "wo"].iter().zip(w).enumerate() {
        if t.shape() != [d, d] {
            return Err(usage!("{n} has shape {:?}, expected [{d}, {d}]", t.shape()));
        }
        ids[i] = store.add(*n, t.clone())?;
    }
    Ok((store, Attention { wq: ids[0], wk: ids[1], wv: ids[2], wo: ids[3], heads, d }))
}

/// Self-attention over the tokens `x [n, D]`; projections are `[D, D]`, applied as `x·W`.
pub fn self_attention(x: &Tensor, heads: usize, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor) -> Result<Tensor> {
    cross_attention_combine(x, x, heads, wq, wk, wv, wo)
}

/// Attention with queries from `t_i [n_i, D]` and keys and values from `t_j [n_j, D]`.
pub fn cross_attention_combine(t_i: &Tensor, t_j: &Tensor, heads: usize, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor) -> Result<Tensor> {
    let (ni, d) = rank2(t_i, "cross_attention_combine")?;
    let (nj, dj) = rank2(t_j, "cross_attention_combine")?;
    if d != dj {
        return Err(usage!("token widths {d} and {dj} differ"));
    }
    let (mut store, attn) = attention_store(d, heads, [wq, wk, wv, wo])?;
    let out = eval_with(&mut store, |ctx| {
        let q = ctx.tape.constant(t_i.clone().reshaped(vec![1, ni, d])?);
        let kv = ctx.tape.constant(t_j.clone().reshaped(vec![1, nj, d])?);
        attn.forward(ctx, q, kv)
    })?;
    out.reshaped(vec![ni, d])
}

/// Encoder layer on `x [n, D]` with parameters from `store`, evaluation mode.
pub fn transformer_encoder_layer(store: &mut ParamStore, layer: &EncoderLayer, x: &Tensor) -> Result<Tensor> {
    let (n, d) = rank2(x, "transformer_encoder_layer")?;
    let out = eval_with(store, |ctx| {
        let v = ctx.tape.constant(x.clone().reshaped(vec![1, n, d])?);
        layer.forward(ctx, v)
    })?;
    out.reshaped(vec![n, d])
}

/// Closing combination of `h` and `m` with parameters from `store`, evaluation mode.
pub fn residual_fnn_combine(store: &mut ParamStore, block: &ResidualFnn, h: &Tensor, m: &Tensor) -> Result<Tensor> {
    if h.shape() != m.shape() {
        return Err(usage!("closing over {:?} and {:?}", h.shape(), m.shape()));
    }
    eval_with(store, |ctx| {
        let (hv, mv) = (ctx.tape.constant(h.clone()), ctx.tape.constant(m.clone()));
        block.forward(ctx, hv, mv)
    })
}

/// Attention-weighted aggregation of `messages` (each shaped like `center [n, D]`).
/// Projections are `[D, D]`. No messages gives zeros.
pub fn attend_aggregate(center: &Tensor, messages: &[Tensor], wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let (n, d) = rank2(center, "attend_aggregate")?;
    if messages.iter().any(|m| m.shape() != center.shape()) {
        return Err(usage!("every message must have shape {:?}", center.shape()));
    }
    if messages.is_empty() {
        return Ok(Tensor::zeros(&[n, d]));
    }
    let mut store = ParamStore::new();
    let block = AttendAggregate { wq: store.add("wq", wq.clone())?, wk: store.add("wk", wk.clone())?, wv: store.add("wv", wv.clone())? };
    let src = vec![0; messages.len()];
    let dst: Vec<usize> = (0..messages.len()).collect();
    let edges = EdgeBatch::new(&src, &dst, 1);
    let out = eval_with(&mut store, |ctx| {
        let c = ctx.tape.constant(center.clone().reshaped(vec![1, n, d])?);
        let data = messages.iter().flat_map(|m| m.data().iter().copied()).collect();
        let m = ctx.tape.constant(Tensor::new(vec![messages.len(), n, d], data)?);
        block.forward(ctx, c, m, &edges)
    })?;
    out.reshaped(vec![n, d])
}

/// Elementwise sum of equally shaped states; no states gives zeros of `shape`.
pub fn sum_aggregate(states: &[Tensor], shape: &[usize]) -> Result<Tensor> {
    let mut out = Tensor::zeros(shape);
    for s in states {
        if s.shape() != shape {
            return Err(usage!("state {:?} in a sum over {shape:?}", s.shape()));
        }
        out.data_mut().iter_mut().zip(s.data()).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// `t_i [n_i, D]` plus the mean token of `t_j [n_j, D]`.
pub fn add_mean_combine(t_i: &Tensor, t_j: &Tensor) -> Result<Tensor> {
    let (ni, d) = rank2(t_i, "add_mean_combine")?;
    let (nj, dj) = rank2(t_j, "add_mean_combine")?;
    let (src, dst) = ([0], [0]);
    let edges = EdgeBatch::new(&src, &dst, 1);
    let out = eval_with(&mut ParamStore::new(), |ctx| {
        let c = ctx.tape.constant(t_i.clone().reshaped(vec![1, ni, d])?);
        let n = ctx.tape.constant(t_j.clone().reshaped(vec![1, nj, dj])?);
        AddMeanCombine.forward(ctx, c, n, &edges)
    })?;
    out.reshaped(vec![ni, d])
}

/// Row-major flattening of `t [n, D]` to `[1, n·D]`.
pub fn concat_attributes(t: &Tensor) -> Result<Tensor> {
    let (n, d) = rank2(t, "concat_attributes")?;
    t.clone().reshaped(vec![1, n * d])
}

/// `(t_i·W_self + t_j·W_fk) / deg` with `W_self [F_i, F_i]`, `W_fk [F_j, F_i]`.
pub fn sage_combine(t_i: &[f64], t_j: &[f64], deg: usize, w_self: &Tensor, w_fk: &Tensor) -> Result<Vec<f64>> {
    if deg == 0 {
        return Err(usage!("sage_combine needs a positive degree"));
    }
    let (fi, fj) = (t_i.len(), t_j.len());
    if w_self.shape() != [fi, fi] || w_fk.shape() != [fj, fi] {
        return Err(usage!("sage weights {:?} and {:?} for widths {fi} and {fj}", w_self.shape(), w_fk.shape()));
    }
    let mut store = ParamStore::new();
    let block = SageCombine { w_self: store.add("w_self", w_self.clone())?, w_fk: store.add("w_fk", w_fk.clone())? };
    let (src, dst) = (vec![0; deg], vec![0; deg]);
    let edges = EdgeBatch::new(&src[..1], &dst[..1], 1);
    let edges = EdgeBatch { inv_degree: vec![1.0 / deg as f64], ..edges };
    let out = eval_with(&mut store, |ctx| {
        let c = ctx.tape.constant(Tensor::new(vec![1, 1, fi], t_i.to_vec())?);
        let n = ctx.tape.constant(Tensor::new(vec![1, 1, fj], t_j.to_vec())?);
        block.forward(ctx, c, n, &edges)
    })?;
    Ok(out.into_data())
}
