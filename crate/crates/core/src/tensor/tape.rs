use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, usage, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Gather { x: Var, index: Vec<usize> },
    ScatterAdd { x: Var, index: Vec<usize> },
    SegmentSoftmax { x: Var, segment: Vec<usize> },
    ScaleRows { x: Var, w: Var },
    SumLast(Var),
    MeanMiddle(Var),
    BroadcastMiddle(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0[v.0].as_deref()
    }
}

/// Records operations in creation order, which is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let f = t.last_dim();
    (if f == 0 { 0 } else { t.len() / f }, f)
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m, n] += a[m, k] * b[k, n]` (or `b[n, k]` when `trans_b`).
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, trans_b: bool) {
    if trans_b && m >= 8 {
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        return gemm(a, &bt, out, m, k, n, false);
    }
    let mut i = 0;
    if !trans_b {
        while i + 4 <= m {
            let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            for p in 0..k {
                let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    let bv = brow[j];
                    o0[j] += a0 * bv;
                    o1[j] += a1 * bv;
                    o2[j] += a2 * bv;
                    o3[j] += a3 * bv;
                }
            }
            i += 4;
        }
    }
    for i in i..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        if trans_b {
            for (j, o) in orow.iter_mut().enumerate() {
                *o += dot(arow, &b[j * k..(j + 1) * k]);
            }
        } else {
            for (p, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    axpy(orow, &b[p * n..(p + 1) * n], av);
                }
            }
        }
    }
}

/// `out[k, n] += a[m, k]^T * g[m, n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(&mut out[p * n..(p + 1) * n], grow, av);
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Writes `src` (shape `shape`) permuted by `perm` into `dst`, or scatters back when `inverse`.
fn permute_into(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64], inverse: bool) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for (o, _) in (0..src.len()).enumerate() {
        let mut off = 0;
        for d in 0..rank {
            off += idx[d] * in_strides[perm[d]];
        }
        if inverse {
            dst[off] += src[o];
        } else {
            dst[o] = src[off];
        }
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn normalize_rows(x: &[f64], f: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = if f == 0 { 0 } else { x.len() / f };
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * f..(r + 1) * f];
        let mean = row.iter().sum::<f64>() / f as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        let is = 1.0 / libm::sqrt(var + eps);
        inv[r] = is;
        for (o, v) in xhat[r * f..(r + 1) * f].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter once per tape; repeated uses share the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.requires_grad);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    /// `x[.., f] + b[f]`
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let f = self.value(x).last_dim();
        if self.shape(b) != [f] {
            return Err(shape_err!("bias {:?} for input {:?}", self.shape(b), self.shape(x)));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(f.max(1)) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.needs(x);
        Ok(self.push(t, Op::Scale(x, c), ng))
    }

    /// `a[.., k] · b[k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = rows_of(va);
        if vb.rank() != 2 || vb.shape()[0] != k || va.rank() == 0 {
            return Err(shape_err!("matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let n = vb.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(va.data(), vb.data(), &mut out, m, k, n, false);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    /// `a[B, m, k] · b[B, k, n]`, or `b[B, n, k]` transposed when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 3 || vb.rank() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(shape_err!("batch_matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (kb, n) = if trans_b { (vb.shape()[2], vb.shape()[1]) } else { (vb.shape()[1], vb.shape()[2]) };
        if kb != k {
            return Err(shape_err!("batch_matmul inner dims {k} vs {kb}"));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                trans_b,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for {shape:?}"));
        }
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![0.0; self.value(x).len()];
        permute_into(self.value(x).data(), &shape, perm, &mut out, false);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.needs(x);
        Ok(self.push(t, Op::Relu(x), ng))
    }

    /// Softmax over the last dimension with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|z| z.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let f = v.last_dim();
        let mut t = v.clone();
        for row in t.data_mut().chunks_mut(f.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for z in row.iter_mut() {
                *z = libm::exp(*z - max);
                sum += *z;
            }
            row.iter_mut().for_each(|z| *z /= sum);
        }
        let ng = self.needs(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Normalizes each last-dim row to zero mean / unit variance, then `* gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let f = self.value(x).last_dim();
        if self.shape(gain) != [f] || self.shape(bias) != [f] {
            return Err(shape_err!("layer_norm gain/bias for width {f}"));
        }
        let (xhat, inv_std) = normalize_rows(self.value(x).data(), f, eps);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(f.max(1)) {
            for ((o, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Column-wise normalization of `x[rows, f]`. With `stats = None` the batch
    /// statistics are used (training); otherwise the given `(mean, var)`.
    /// Returns the batch mean and biased variance alongside the output.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, stats: Option<(&[f64], &[f64])>, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (rows, f) = rows_of(self.value(x));
        if self.shape(gain) != [f] || self.shape(bias) != [f] {
            return Err(shape_err!("batch_norm gain/bias for width {f}"));
        }
        let xd = self.value(x).data();
        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                if rows < 2 {
                    return Err(usage!("batch_norm training needs at least 2 rows, got {rows}"));
                }
                let mut mean = vec![0.0; f];
                for r in 0..rows {
                    axpy(&mut mean, &xd[r * f..(r + 1) * f], 1.0);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; f];
                for r in 0..rows {
                    for c in 0..f {
                        let d = xd[r * f + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
        };
        if mean.len() != f || var.len() != f {
            return Err(shape_err!("batch_norm statistics for width {f}"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut xhat = vec![0.0; xd.len()];
        for r in 0..rows {
            for c in 0..f {
                xhat[r * f + c] = (xd[r * f + c] - mean[c]) * inv_std[c];
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(f.max(1)) {
            for c in 0..row.len() {
                row[c] = row[c] * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        let train = stats.is_none();
        let v = self.push(t, Op::BatchNorm { x, gain, bias, xhat, inv_std, train }, ng);
        Ok((v, mean, var))
    }

    /// Selects first-axis slices: `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n0 = *v.shape().first().ok_or_else(|| shape_err!("gather on a scalar"))?;
        let row = if n0 == 0 { 0 } else { v.len() / n0 };
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            if i >= n0 {
                return Err(usage!("gather index {i} out of range {n0}"));
            }
            out.extend_from_slice(&v.data()[i * row..(i + 1) * row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index: index.to_vec() }, ng))
    }

    /// Sums first-axis slices into `segments` buckets: `out[index[i]] += x[i]`.
    pub fn scatter_add(&mut self, x: Var, index: &[usize], segments: usize) -> Result<Var> {
        let v = self.value(x);
        let n0 = *v.shape().first().ok_or_else(|| shape_err!("scatter on a scalar"))?;
        if index.len() != n0 {
            return Err(shape_err!("scatter index length {} for {n0} rows", index.len()));
        }
        let row: usize = v.shape()[1..].iter().product();
        let mut out = vec![0.0; segments * row];
        for (i, &s) in index.iter().enumerate() {
            if s >= segments {
                return Err(usage!("scatter segment {s} out of range {segments}"));
            }
            axpy(&mut out[s * row..(s + 1) * row], &v.data()[i * row..(i + 1) * row], 1.0);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = segments;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScatterAdd { x, index: index.to_vec() }, ng))
    }

    /// Softmax over first-axis rows sharing a segment id, independently per trailing position.
    pub fn segment_softmax(&mut self, x: Var, segment: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n0 = *v.shape().first().ok_or_else(|| shape_err!("segment softmax on a scalar"))?;
        if segment.len() != n0 {
            return Err(shape_err!("segment length {} for {n0} rows", segment.len()));
        }
        let row: usize = v.shape()[1..].iter().product();
        let nseg = segment.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; nseg * row];
        for (i, &s) in segment.iter().enumerate() {
            for c in 0..row {
                let z = v.data()[i * row + c];
                if z.is_nan() {
                    return Err(Error::Numeric("NaN input to segment softmax".into()));
                }
                max[s * row + c] = max[s * row + c].max(z);
            }
        }
        let mut out = vec![0.0; v.len()];
        let mut sum = vec![0.0; nseg * row];
        for (i, &s) in segment.iter().enumerate() {
            for c in 0..row {
                let e = libm::exp(v.data()[i * row + c] - max[s * row + c]);
                out[i * row + c] = e;
                sum[s * row + c] += e;
            }
        }
        for (i, &s) in segment.iter().enumerate() {
            for c in 0..row {
                out[i * row + c] /= sum[s * row + c];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::SegmentSoftmax { x, segment: segment.to_vec() }, ng))
    }

    /// `x[.., f] * w[..]`: scales every last-dim vector by its own weight.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (rows, f) = rows_of(vx);
        if vw.len() != rows || vx.shape()[..vx.rank().saturating_sub(1)] != *vw.shape() {
            return Err(shape_err!("scale_rows {:?} by {:?}", vx.shape(), vw.shape()));
        }
        let mut t = vx.clone();
        for (r, row) in t.data_mut().chunks_mut(f.max(1)).enumerate() {
            let wv = vw.data()[r];
            row.iter_mut().for_each(|v| *v *= wv);
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::ScaleRows { x, w }, ng))
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(shape_err!("sum_last on a scalar"));
        }
        let f = v.last_dim();
        let data: Vec<f64> = if f == 0 {
            vec![0.0; v.shape()[..v.rank() - 1].iter().product()]
        } else {
            v.data().chunks(f).map(|r| r.iter().sum()).collect()
        };
        let t = Tensor::new(v.shape()[..v.rank() - 1].to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::SumLast(x), ng))
    }

    /// `[a, b, c] -> [a, c]` averaging over the middle axis.
    pub fn mean_middle(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let &[a, b, c] = v.shape() else {
            return Err(shape_err!("mean_middle expects rank 3, got {:?}", v.shape()));
        };
        if b == 0 {
            return Err(usage!("mean over zero tokens"));
        }
        let mut out = vec![0.0; a * c];
        for i in 0..a {
            for j in 0..b {
                axpy(&mut out[i * c..(i + 1) * c], &v.data()[(i * b + j) * c..(i * b + j + 1) * c], 1.0 / b as f64);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![a, c], out)?, Op::MeanMiddle(x), ng))
    }

    /// `[a, c] -> [a, b, c]` repeating along a new middle axis.
    pub fn broadcast_middle(&mut self, x: Var, b: usize) -> Result<Var> {
        let v = self.value(x);
        let &[a, c] = v.shape() else {
            return Err(shape_err!("broadcast_middle expects rank 2, got {:?}", v.shape()));
        };
        let mut out = Vec::with_capacity(a * b * c);
        for i in 0..a {
            for _ in 0..b {
                out.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![a, b, c], out)?, Op::BroadcastMiddle(x), ng))
    }

    /// Concatenates `[rows, f_i]` blocks along the last axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| usage!("concat of nothing"))?;
        let rows = rows_of(self.value(*first)).0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, f) = rows_of(self.value(x));
            if self.value(x).rank() != 2 || (r != rows && f != 0) {
                return Err(shape_err!("concat_cols needs equal row counts, got {:?}", self.shape(x)));
            }
            widths.push(f);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &f) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * f..(r + 1) * f]);
            }
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Concatenates along the first axis; trailing shapes must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| usage!("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut n0 = 0;
        let mut out = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.rank() == 0 || v.shape()[1..] != *tail {
                return Err(shape_err!("concat_rows {:?} with trailing {tail:?}", v.shape()));
            }
            n0 += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![n0];
        shape.extend(tail);
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatRows(xs.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(usage!("mean of an empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (rows, k) = rows_of(v);
        if v.rank() != 2 || labels.len() != rows || rows == 0 {
            return Err(shape_err!("cross_entropy logits {:?} for {} labels", v.shape(), labels.len()));
        }
        let mut probs = vec![0.0; rows * k];
        let mut loss = 0.0;
        for r in 0..rows {
            if labels[r] >= k {
                return Err(usage!("label {} out of range for {k} classes", labels[r]));
            }
            let row = &v.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|z| libm::exp(z - max)).sum::<f64>());
            for c in 0..k {
                probs[r * k + c] = libm::exp(row[c] - lse);
            }
            loss += lse - row[labels[r]];
        }
        let t = Tensor::scalar(loss / rows as f64);
        let ng = self.needs(logits);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng))
    }

    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let v = self.value(pred);
        if v.len() != target.len() || target.is_empty() {
            return Err(shape_err!("mse prediction of {} values for {} targets", v.len(), target.len()));
        }
        let l = v.data().iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / target.len() as f64;
        let ng = self.needs(pred);
        Ok(self.push(Tensor::scalar(l), Op::Mse { pred, target: target.to_vec() }, ng))
    }

    /// Back-propagates from a scalar, accumulating into the gradients of every
    /// recorded parameter that requires one.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(usage!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let p = store.get_mut(*id);
                if p.requires_grad {
                    axpy(p.grad.data_mut(), g, 1.0);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, gv), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, gv), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, g, 1.0);
                }
                let f = self.value(*b).len();
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(f.max(1)) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, g, *c);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = rows_of(va);
                let n = vb.shape()[1];
                let (ad, bd) = (va.data(), vb.data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(g, bd, ga, m, n, k, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(ad, g, gb, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = if *trans_b { vb.shape()[1] } else { vb.shape()[2] };
                let (ad, bd) = (va.data(), vb.data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // g[m,n] · b[n,k]
                            gemm(gi, bi, out, m, n, k, false);
                        } else {
                            gemm(gi, bi, out, m, n, k, true);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // gb[n,k] += g^T[n,m] · a[m,k]
                            gemm_tn(gi, ai, out, m, n, k);
                        } else {
                            gemm_tn(ai, gi, out, m, k, n);
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let shape = self.shape(*x).to_vec();
                if let Some(gx) = self.acc(grads, *x) {
                    permute_into(g, &shape, perm, gx, true);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, gv), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let f = node.value.last_dim().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), dr) in y.chunks(f).zip(g.chunks(f)).zip(gx.chunks_mut(f)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let f = self.value(*gain).len().max(1);
                let gain_v = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, xr) in g.chunks(f).zip(xhat.chunks(f)) {
                        for ((d, gv), xv) in gg.iter_mut().zip(gr).zip(xr) {
                            *d += gv * xv;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(f) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = f as f64;
                    for (r, (gr, xr)) in g.chunks(f).zip(xhat.chunks(f)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..f {
                            let dxh = gr[c] * gain_v[c];
                            s1 += dxh;
                            s2 += dxh * xr[c];
                        }
                        let dr = &mut gx[r * f..(r + 1) * f];
                        for c in 0..f {
                            let dxh = gr[c] * gain_v[c];
                            dr[c] += inv_std[r] / nf * (nf * dxh - s1 - xr[c] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std, train } => {
                let f = self.value(*gain).len().max(1);
                let rows = xhat.len() / f;
                let gain_v = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, xr) in g.chunks(f).zip(xhat.chunks(f)) {
                        for ((d, gv), xv) in gg.iter_mut().zip(gr).zip(xr) {
                            *d += gv * xv;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(f) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    if *train {
                        let nr = rows as f64;
                        let mut s1 = vec![0.0; f];
                        let mut s2 = vec![0.0; f];
                        for r in 0..rows {
                            for c in 0..f {
                                let dxh = g[r * f + c] * gain_v[c];
                                s1[c] += dxh;
                                s2[c] += dxh * xhat[r * f + c];
                            }
                        }
                        for r in 0..rows {
                            for c in 0..f {
                                let dxh = g[r * f + c] * gain_v[c];
                                gx[r * f + c] += inv_std[c] / nr * (nr * dxh - s1[c] - xhat[r * f + c] * s2[c]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..f {
                                gx[r * f + c] += g[r * f + c] * gain_v[c] * inv_std[c];
                            }
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let n0 = self.shape(*x)[0];
                let row = if n0 == 0 { 0 } else { self.value(*x).len() / n0 };
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &src) in index.iter().enumerate() {
                        axpy(&mut gx[src * row..(src + 1) * row], &g[i * row..(i + 1) * row], 1.0);
                    }
                }
            }
            Op::ScatterAdd { x, index } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &s) in index.iter().enumerate() {
                        axpy(&mut gx[i * row..(i + 1) * row], &g[s * row..(s + 1) * row], 1.0);
                    }
                }
            }
            Op::SegmentSoftmax { x, segment } => {
                let y = node.value.data();
                let row: usize = node.value.shape()[1..].iter().product();
                let nseg = segment.iter().copied().max().map_or(0, |m| m + 1);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dot = vec![0.0; nseg * row];
                    for (i, &s) in segment.iter().enumerate() {
                        for c in 0..row {
                            dot[s * row + c] += y[i * row + c] * g[i * row + c];
                        }
                    }
                    for (i, &s) in segment.iter().enumerate() {
                        for c in 0..row {
                            gx[i * row + c] += y[i * row + c] * (g[i * row + c] - dot[s * row + c]);
                        }
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let f = vx.last_dim().max(1);
                let (xd, wd) = (vx.data(), vw.data());
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (dr, gr)) in gx.chunks_mut(f).zip(g.chunks(f)).enumerate() {
                        axpy(dr, gr, wd[r]);
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for (r, (xr, gr)) in xd.chunks(f).zip(g.chunks(f)).enumerate() {
                        gw[r] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::SumLast(x) => {
                let f = self.value(*x).last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    if f > 0 {
                        for (dr, gv) in gx.chunks_mut(f).zip(g) {
                            dr.iter_mut().for_each(|d| *d += gv);
                        }
                    }
                }
            }
            Op::MeanMiddle(x) => {
                let &[a, b, c] = self.shape(*x) else { unreachable!() };
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..a {
                        for j in 0..b {
                            axpy(&mut gx[(i * b + j) * c..(i * b + j + 1) * c], &g[i * c..(i + 1) * c], 1.0 / b as f64);
                        }
                    }
                }
            }
            Op::BroadcastMiddle(x) => {
                let &[a, b, c] = node.value.shape() else { unreachable!() };
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..a {
                        for j in 0..b {
                            axpy(&mut gx[i * c..(i + 1) * c], &g[(i * b + j) * c..(i * b + j + 1) * c], 1.0);
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.last_dim();
                let rows = rows_of(&node.value).0;
                let mut off = 0;
                for &x in xs {
                    let f = self.value(x).last_dim();
                    if let Some(gx) = self.acc(grads, x) {
                        for r in 0..rows {
                            axpy(&mut gx[r * f..(r + 1) * f], &g[r * total + off..r * total + off + f], 1.0);
                        }
                    }
                    off += f;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if let Some(gx) = self.acc(grads, x) {
                        axpy(gx, &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).last_dim();
                let rows = labels.len() as f64;
                if let Some(gx) = self.acc(grads, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..k {
                            let t = if c == l { 1.0 } else { 0.0 };
                            gx[r * k + c] += g[0] * (probs[r * k + c] - t) / rows;
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let n = target.len() as f64;
                if let Some(gx) = self.acc(grads, *pred) {
                    for ((d, pv), y) in gx.iter_mut().zip(p).zip(target) {
                        *d += g[0] * 2.0 * (pv - y) / n;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let s = tape.sum(x).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0; 6]);
        // accumulation across calls
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0; 6]);
    }

    #[test]
    fn product_rule() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.input(Tensor::scalar(-4.0));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p, &mut store).unwrap();
        assert_eq!(g.get(x).unwrap(), &[-4.0]);
        assert_eq!(g.get(y).unwrap(), &[3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn permute_matches_index_math() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 2], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let p = tape.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(tape.shape(p), &[3, 2, 2]);
        // out[j, i, k] = in[i, j, k]
        assert_eq!(&tape.value(p).data()[..4], &[0.0, 1.0, 6.0, 7.0]);
    }

    #[test]
    fn segment_softmax_groups() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[0.0, 0.0, 5.0]));
        let s = tape.segment_softmax(x, &[0, 0, 1]).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 1.0]);
    }

    #[test]
    fn zero_sized_tensors_flow() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2, 3], &[1.0; 6])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 2]));
        let wv = tape.param(&store, w);
        let y = tape.matmul(x, wv).unwrap();
        assert_eq!(tape.shape(y), &[0, 3]);
        let s = tape.scatter_add(y, &[], 4).unwrap();
        assert_eq!(tape.shape(s), &[4, 3]);
        let total = tape.sum(s).unwrap();
        tape.backward(total, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[0.0; 6]);
    }
}
