use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor};

/// Adam with linear warmup and global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// What happened during one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(lr: f64, warmup_steps: u64, clip_norm: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Learning rate used at (1-based) step `s`.
    pub fn lr_at(&self, s: u64) -> f64 {
        if self.warmup_steps > 0 && s < self.warmup_steps {
            self.lr * s as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    /// Applies one update. Gradients of non-trainable parameters are ignored.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> StepInfo {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        let live: Vec<&(ParamId, Tensor)> = grads
            .iter()
            .filter(|(id, _)| store.is_trainable(*id))
            .collect();
        let norm = live
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clipped = self.clip_norm > 0.0 && norm > self.clip_norm;
        let scale = if clipped { self.clip_norm / norm } else { 1.0 };
        if clipped {
            log::debug!("gradient norm {norm:.4} clipped to {}", self.clip_norm);
        }

        self.step += 1;
        let lr = self.lr_at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in live {
            let i = id.index();
            let n = g.numel();
            if self.m[i].len() != n {
                self.m[i] = vec![0.0; n];
                self.v[i] = vec![0.0; n];
            }
            if lr == 0.0 {
                // keep moments in sync but leave parameters bitwise untouched
                for (k, &gv) in g.data().iter().enumerate() {
                    let gv = gv * scale;
                    self.m[i][k] = self.beta1 * self.m[i][k] + (1.0 - self.beta1) * gv;
                    self.v[i][k] = self.beta2 * self.v[i][k] + (1.0 - self.beta2) * gv * gv;
                }
                continue;
            }
            let p = store.value_mut(*id).data_mut();
            for (k, &gv) in g.data().iter().enumerate() {
                let gv = gv * scale;
                let m = self.beta1 * self.m[i][k] + (1.0 - self.beta1) * gv;
                let v = self.beta2 * self.v[i][k] + (1.0 - self.beta2) * gv * gv;
                self.m[i][k] = m;
                self.v[i][k] = v;
                p[k] -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            }
        }
        StepInfo {
            lr,
            grad_norm: norm,
            clipped,
        }
    }
}

/// Sums `src` into `acc` parameter-wise.
pub fn accumulate(acc: &mut Vec<(ParamId, Tensor)>, src: Vec<(ParamId, Tensor)>) {
    for (id, g) in src {
        match acc.iter_mut().find(|(i, _)| *i == id) {
            Some((_, a)) => a
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(x, y)| *x += y),
            None => acc.push((id, g)),
        }
    }
}

/// Divides every accumulated gradient by `n`.
pub fn average(acc: &mut [(ParamId, Tensor)], n: usize) {
    let inv = 1.0 / n.max(1) as f64;
    for (_, g) in acc {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        (s, id)
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let a = Adam::new(2e-4, 100, 5.0);
        assert!((a.lr_at(1) - 2e-6).abs() < 1e-18);
        assert!((a.lr_at(50) - 1e-4).abs() < 1e-18);
        assert_eq!(a.lr_at(100), 2e-4);
        assert_eq!(a.lr_at(1000), 2e-4);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = store();
        let mut a = Adam::new(0.1, 0, 0.0);
        a.apply(
            &mut s,
            &[(id, Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())],
        );
        let v = s.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let (mut s, id) = store();
        let before = s.value(id).clone();
        let mut a = Adam::new(0.0, 0, 5.0);
        a.apply(
            &mut s,
            &[(id, Tensor::new(vec![2], vec![3.0, 1.0]).unwrap())],
        );
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn large_gradients_are_clipped() {
        let (mut s, id) = store();
        let mut a = Adam::new(0.1, 0, 5.0);
        let info = a.apply(
            &mut s,
            &[(id, Tensor::new(vec![2], vec![30.0, 40.0]).unwrap())],
        );
        assert!(info.clipped);
        assert_eq!(info.grad_norm, 50.0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut s, id) = store();
        s.set_all_trainable(false);
        let before = s.value(id).clone();
        let mut a = Adam::new(0.1, 0, 5.0);
        a.apply(
            &mut s,
            &[(id, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())],
        );
        assert_eq!(s.value(id), &before);
    }
}
