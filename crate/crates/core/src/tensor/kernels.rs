use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, usage, Result};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self { running_mean: vec![0.0; width], running_var: vec![1.0; width] }
    }

    /// Records batch norm on `tape`. Training mode uses batch statistics and
    /// folds them into the running estimates (unbiased variance).
    pub fn apply(&mut self, tape: &mut Tape, x: Var, gain: Var, bias: Var, training: bool) -> Result<Var> {
        if training {
            let rows = tape.value(x).len() / tape.value(x).last_dim().max(1);
            let (y, mean, var) = tape.batch_norm(x, gain, bias, None, BN_EPS)?;
            let unbias = rows as f64 / (rows as f64 - 1.0);
            for c in 0..mean.len() {
                self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
                self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * unbias;
            }
            Ok(y)
        } else {
            let (y, _, _) = tape.batch_norm(x, gain, bias, Some((&self.running_mean, &self.running_var)), BN_EPS)?;
            Ok(y)
        }
    }
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v)?;
    Ok(tape.value(y).clone())
}

/// Normalizes the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (v, g, b) = (tape.constant(x.clone()), tape.constant(gain.clone()), tape.constant(bias.clone()));
    let y = tape.layer_norm(v, g, b, LN_EPS)?;
    Ok(tape.value(y).clone())
}

/// Column-wise batch norm of `x[rows, f]` with unit gain and zero bias.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState, training: bool) -> Result<Tensor> {
    let f = x.last_dim();
    if state.running_mean.len() != f {
        return Err(shape_err!("batch_norm state width {} for input {:?}", state.running_mean.len(), x.shape()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let g = tape.constant(Tensor::filled(&[f], 1.0));
    let b = tape.constant(Tensor::zeros(&[f]));
    let y = state.apply(&mut tape, v, g, b, training)?;
    Ok(tape.value(y).clone())
}

/// `W2 · relu(W1 · x + b1) + b2` over the last axis; weights are stored `[in, out]`.
pub fn ffn_block(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xs = [x, w1, b1, w2, b2].map(|t| tape.constant(t.clone()));
    let y = ffn(&mut tape, xs[0], xs[1], xs[2], xs[3], xs[4]).map_err(|e| usage!("ffn_block: {e}"))?;
    Ok(tape.value(y).clone())
}

pub(crate) fn ffn(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, w2)?;
    tape.add_bias(o, b2)
}

/// `x · W + b` with parameters looked up from the store.
pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, x: Var, w: super::ParamId, b: Option<super::ParamId>) -> Result<Var> {
    let wv = tape.param(store, w);
    let y = tape.matmul(x, wv)?;
    match b {
        Some(b) => {
            let bv = tape.param(store, b);
            tape.add_bias(y, bv)
        }
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::matrix(&[&[0.0, 0.0, 0.0], &[libm::log(1.0), libm::log(2.0), libm::log(3.0)]]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert!(close(y.row(0), &[1.0 / 3.0; 3], 1e-15));
        assert!(close(y.row(1), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));
        let shifted = Tensor::matrix(&[&[100.0, 100.0, 100.0]]).unwrap();
        assert!(close(softmax_rows(&shifted).unwrap().data(), &[1.0 / 3.0; 3], 1e-15));
        let nan = Tensor::matrix(&[&[f64::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax_rows(&nan), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let (g, b) = (Tensor::filled(&[2], 1.0), Tensor::zeros(&[2]));
        let y = layer_norm(&Tensor::vector(vec![1.0, -1.0]), &g, &b).unwrap();
        let expect = 1.0 / libm::sqrt(1.0 + LN_EPS);
        assert!(close(y.data(), &[expect, -expect], 1e-15));
        let c = layer_norm(&Tensor::vector(vec![4.0, 4.0]), &g, &b).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_norm_cases() {
        let mut st = BatchNormState::new(1);
        let x = Tensor::new(vec![2, 1], vec![2.0, 4.0]).unwrap();
        let y = batch_norm(&x, &mut st, true).unwrap();
        let e = 1.0 / libm::sqrt(1.0 + BN_EPS);
        assert!(close(y.data(), &[-e, e], 1e-12));
        // running var uses the unbiased batch variance (2.0)
        assert!(close(&st.running_mean, &[0.3], 1e-15));
        assert!(close(&st.running_var, &[0.9 + 0.2], 1e-15));
        let mut id = BatchNormState::new(1);
        let ev = batch_norm(&x, &mut id, false).unwrap();
        assert!(close(ev.data(), &[2.0 / libm::sqrt(1.0 + BN_EPS), 4.0 / libm::sqrt(1.0 + BN_EPS)], 1e-15));
        let one = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert!(matches!(batch_norm(&one, &mut id, true), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn ffn_hand_case() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let w1 = Tensor::identity(2);
        let b1 = Tensor::vector(vec![0.0, 3.0]);
        // W2 = [[1,1],[0,1]] acting on column vectors, stored [in, out] as its transpose.
        let w2 = Tensor::matrix(&[&[1.0, 0.0], &[1.0, 1.0]]).unwrap();
        let y = ffn_block(&x, &w1, &b1, &w2, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[2.0, 1.0]);
        let z = ffn_block(&x, &Tensor::zeros(&[2, 2]), &b1, &Tensor::zeros(&[2, 2]), &Tensor::vector(vec![5.0, 6.0])).unwrap();
        assert_eq!(z.data(), &[5.0, 6.0]);
        assert!(matches!(ffn_block(&x, &Tensor::zeros(&[3, 2]), &b1, &w2, &b1), Err(crate::Error::Usage(_))));
    }
}
