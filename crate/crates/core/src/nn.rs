//! Small building blocks shared by the acoustic model and the corrector.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Dense layer `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add_normal(format!("{name}.w"), vec![input, output], 1.0, rng),
            b: store.add_zeros(format!("{name}.b"), vec![output]),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: store.add_zeros(format!("{name}.w"), vec![input, output]),
            b: store.add_zeros(format!("{name}.b"), vec![output]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Layer-norm gain and bias, initialised to identity.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_constant(format!("{name}.gamma"), vec![dim], 1.0),
            beta: store.add_zeros(format!("{name}.beta"), vec![dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Standard sinusoidal position table, `len x dim`.
pub fn sinusoid_table(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = (p as f64 * rate).sin();
            data[p * dim + 2 * i + 1] = (p as f64 * rate).cos();
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape matches")
}

/// Cosine/sine features of a real position at the given frequencies (cycles per unit).
pub fn periodic_features(pos: f64, freqs: &[f64]) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    freqs
        .iter()
        .flat_map(|f| [(tau * f * pos).cos(), (tau * f * pos).sin()])
        .collect()
}

/// Multiplies a plain row vector by a `rows x cols` matrix.
pub(crate) fn vec_mat(x: &[f64], w: &Tensor, out: &mut [f64]) {
    let cols = w.cols();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w.data()[i * cols..(i + 1) * cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

pub(crate) fn log_softmax_vec(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter_mut().for_each(|v| *v -= lse);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_features_peak_at_zero_offset() {
        let f = [0.5, 0.25, 0.125];
        let a = periodic_features(3.0, &f);
        let dot = |b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&a) - 3.0).abs() < 1e-12);
        assert!(dot(&periodic_features(4.0, &f)) < dot(&a));
    }

    #[test]
    fn sinusoid_first_row_alternates() {
        let t = sinusoid_table(2, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn vec_mat_matches_graph_matmul() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut out = vec![0.0; 3];
        vec_mat(&[1.0, -1.0], &w, &mut out);
        assert_eq!(out, vec![-3.0, -3.0, -3.0]);
    }
}
