use alloc::string::String;
use alloc::vec::Vec;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{usage, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter or input name and flat coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self { max_rel_error: 0.0, worst: None, coords_checked: 0 }
    }

    fn record(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.coords_checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((String::from(name), coord));
        }
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(usage!("grad_check needs a scalar function, got shape {:?}", t.shape()));
    }
    Ok(t.item())
}

fn coords(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n => (0..c).map(|i| i * n / c).collect(),
        _ => (0..n).collect(),
    }
}

/// Checks gradients of `f` with respect to each input tensor.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_inputs(&mut ParamStore::new(), |tape, _, xs| f(tape, xs), inputs, h)
}

/// Input gradients of a function that also reads parameters from `store`.
/// Parameter gradients accumulated along the way are cleared.
pub fn grad_check_inputs<F>(store: &mut ParamStore, mut f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &mut ParamStore, &[Var]) -> Result<Var>,
{
    let mut eval = |xs: &[Tensor], analytic: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, store, &vars)?;
        let y = scalar_of(&tape, out)?;
        if !analytic {
            return Ok((y, Vec::new()));
        }
        let g = tape.backward(out, store)?;
        store.zero_grad();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| g.get(*v).map_or_else(|| alloc::vec![0.0; x.len()], <[f64]>::to_vec))
            .collect();
        Ok((y, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheck::new();
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].len() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let (fp, _) = eval(&xs, false)?;
            xs[i].data_mut()[k] = orig - h;
            let (fm, _) = eval(&xs, false)?;
            xs[i].data_mut()[k] = orig;
            report.record(&alloc::format!("input{i}"), k, analytic[i][k], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks gradients of `f` with respect to every parameter in `store`,
/// sampling at most `max_coords` evenly spaced coordinates per parameter.
/// Existing gradients in the store are cleared. `f` may update non-trainable
/// state such as running statistics but must not depend on it.
pub fn grad_check_params<F>(store: &mut ParamStore, mut f: F, h: f64, max_coords: Option<usize>) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    tape.backward(out, store)?;
    let analytic: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grad();

    let mut eval = |store: &mut ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        scalar_of(&tape, out)
    };
    let mut report = GradCheck::new();
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        if !store.get(id).requires_grad {
            continue;
        }
        let name = store.get(id).name.clone();
        for k in coords(store.get(id).value.len(), max_coords) {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            report.record(&name, k, analytic[i].data()[k], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let a = Tensor::matrix(&[&[0.3, -1.2], &[2.0, 0.7]]).unwrap();
        let w = Tensor::matrix(&[&[1.5, -0.4], &[0.25, 0.9]]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                t.sum(y)
            },
            &[a, w],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-15);
    }
}
