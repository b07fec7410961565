use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, OpKind, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error of one coordinate: `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, at: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::inference();
    let x = g.leaf(at.clone(), false)?;
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(Error::NotScalar(g.shape(y).to_vec()));
    }
    Ok(g.scalar_value(y))
}

/// Compares the reverse-mode gradient of `f` at `at` with central differences.
///
/// Returns the maximum relative error over all coordinates of `at`.
pub fn grad_check<F>(f: F, at: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(f, at, step, None)
}

/// [`grad_check`] with an optional deliberately corrupted backward op.
pub fn grad_check_with<F>(f: F, at: &Tensor, step: f64, corrupt: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::invalid(format!(
            "grad_check step {step} outside [1e-6, 1e-3]"
        )));
    }
    let first = eval_scalar(&f, at)?;
    let second = eval_scalar(&f, at)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }

    let mut g = Graph::new();
    if let Some(kind) = corrupt {
        g.corrupt_backward(kind);
    }
    let x = g.leaf(at.clone(), true)?;
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x);

    let mut worst = 0.0f64;
    let mut probe = at.clone();
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of a gradient check over the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct ParamCheckReport {
    pub max_error: f64,
    pub worst_param: Option<String>,
    pub coordinates: usize,
}

/// Gradient check of a loss built from `store` over its trainable parameters.
///
/// At most `max_coords` randomly chosen coordinates are probed per parameter
/// tensor (all of them when the tensor is smaller).
pub fn grad_check_params<F, R>(
    store: &ParamStore,
    loss: F,
    step: f64,
    max_coords: usize,
    corrupt: Option<OpKind>,
    rng: &mut R,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::invalid(format!(
            "grad_check step {step} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let y = loss(&mut g, s)?;
        if g.value(y).numel() != 1 {
            return Err(Error::NotScalar(g.shape(y).to_vec()));
        }
        Ok(g.scalar_value(y))
    };
    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }

    let mut g = Graph::new();
    if let Some(kind) = corrupt {
        g.corrupt_backward(kind);
    }
    let y = loss(&mut g, store)?;
    let grads = g.backward(y)?;
    let mut analytic: Vec<Option<Tensor>> = vec![None; store.len()];
    for (id, grad) in grads.param_grads() {
        analytic[id.index()] = Some(grad);
    }

    let mut probe = store.clone();
    let mut report = ParamCheckReport {
        max_error: 0.0,
        worst_param: None,
        coordinates: 0,
    };
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.value(id).numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = probe.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_error {
                report.max_error = err;
                report.worst_param = Some(store.get(id).name.clone());
            }
        }
    }
    Ok(report)
}
