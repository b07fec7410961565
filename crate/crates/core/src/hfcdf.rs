//! Heterogeneous feature compensation and dynamic fusion of acoustic and text embeddings.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// How acoustic and text embeddings are combined before the corrector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Hfcdf,
    LinguisticOnly,
    AcousticOnly,
    Add,
    Concat,
    Transformer,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::Hfcdf,
        FusionMode::LinguisticOnly,
        FusionMode::AcousticOnly,
        FusionMode::Add,
        FusionMode::Concat,
        FusionMode::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hfcdf => "hfcdf",
            Self::LinguisticOnly => "linguistic_only",
            Self::AcousticOnly => "acoustic_only",
            Self::Add => "add",
            Self::Concat => "concat",
            Self::Transformer => "transformer",
        }
    }

    /// Feature width of the fused rows for embeddings of width `d`.
    pub fn width(self, d: usize) -> usize {
        match self {
            Self::Hfcdf | Self::Concat => 2 * d,
            _ => d,
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

/// Compensation strengths. In paper mode both equal `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub k_a: f64,
    pub k_t: f64,
    pub paper_mode: bool,
}

impl FusionConfig {
    pub fn paper(k: f64) -> Self {
        Self {
            k_a: k,
            k_t: k,
            paper_mode: true,
        }
    }

    pub fn variant(k_a: f64, k_t: f64) -> Self {
        Self {
            k_a,
            k_t,
            paper_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k_a) || !(0.0..=1.0).contains(&self.k_t) {
            return Err(Error::invalid(format!(
                "k_a {} and k_t {} must lie in [0, 1]",
                self.k_a, self.k_t
            )));
        }
        if self.paper_mode && self.k_a != self.k_t {
            return Err(Error::invalid("paper mode requires k_a == k_t"));
        }
        Ok(())
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::variant(0.7, 0.3)
    }
}

/// The fused corrector input: gated compensated rows plus the n-best context.
#[derive(Debug, Clone, Copy)]
pub struct FusedMultimodal {
    pub x_mmc: Var,
    pub y_context: Var,
    /// One-element node holding the gate, when the fusion has one.
    pub mu: Option<Var>,
}

fn truncate_pair(g: &mut Graph, a: Var, b: Var) -> Result<(Var, Var)> {
    let (ra, rb) = (g.shape(a)[0], g.shape(b)[0]);
    if ra == rb {
        return Ok((a, b));
    }
    let n = ra.min(rb);
    log::warn!("length mismatch {ra} vs {rb}; truncating to {n}");
    Ok((g.slice_rows(a, 0, n)?, g.slice_rows(b, 0, n)?))
}

/// Cross-modal difference compensation.
///
/// `x' = x + k_a (y - x)` and `y' = y + (1 - k_t)(x - y)`.
pub fn compensate(g: &mut Graph, x_tok: Var, y_tok: Var, cfg: &FusionConfig) -> Result<(Var, Var)> {
    cfg.validate()?;
    let (x, y) = truncate_pair(g, x_tok, y_tok)?;
    if g.shape(x) != g.shape(y) {
        return Err(Error::Shape {
            op: "compensate",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(y).to_vec(),
        });
    }
    let dx = g.sub(x, y)?;
    let dy = g.sub(y, x)?;
    let ky = g.scale(dy, cfg.k_a)?;
    let kx = g.scale(dx, 1.0 - cfg.k_t)?;
    Ok((g.add(x, ky)?, g.add(y, kx)?))
}

/// Gate `mu = e^Ra / (e^Ra + e^Rt)` from mean row-wise cosine similarities with `target`.
pub fn dynamic_weight(g: &mut Graph, x: Var, y: Var, target: Var) -> Result<Var> {
    let n = g.shape(x)[0].min(g.shape(y)[0]).min(g.shape(target)[0]);
    if n == 0 {
        return Err(Error::Empty("dynamic weight inputs"));
    }
    let cut = |g: &mut Graph, v: Var| {
        if g.shape(v)[0] == n {
            Ok(v)
        } else {
            g.slice_rows(v, 0, n)
        }
    };
    let (x, y, target) = (cut(g, x)?, cut(g, y)?, cut(g, target)?);
    let ca = g.cosine(x, target)?;
    let ct = g.cosine(y, target)?;
    let ra = g.mean(ca)?;
    let rt = g.mean(ct)?;
    let r = g.concat_cols(&[ra, rt])?;
    let p = g.softmax(r)?;
    g.slice_cols(p, 0, 1)
}

/// `mu` from plain similarity scores.
pub fn gate(ra: f64, rt: f64) -> f64 {
    1.0 / (1.0 + (rt - ra).exp())
}

/// `Concat(mu x', (1 - mu) y'_top1)` along features.
pub fn fuse(
    g: &mut Graph,
    x: Var,
    y_top1: Var,
    mu: Var,
    y_context: Var,
) -> Result<FusedMultimodal> {
    if g.shape(x) != g.shape(y_top1) {
        return Err(Error::Shape {
            op: "fuse",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(y_top1).to_vec(),
        });
    }
    let mv = g.value(mu).data()[0];
    if !(mv > 0.0 && mv < 1.0) {
        return Err(Error::invalid(format!("gate {mv} outside (0, 1)")));
    }
    let a = g.scale_by(x, mu)?;
    let one_minus = g.scale(mu, -1.0)?;
    let one_minus = g.offset(one_minus, 1.0)?;
    let b = g.scale_by(y_top1, one_minus)?;
    let x_mmc = g.concat_cols(&[a, b])?;
    Ok(FusedMultimodal {
        x_mmc,
        y_context,
        mu: Some(mu),
    })
}

/// Single-head cross-attention mixer used by the transformer baseline.
#[derive(Debug, Clone, Copy)]
pub struct CrossMixer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl CrossMixer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{prefix}.wq"), d, d, rng),
            k: Linear::new(store, &format!("{prefix}.wk"), d, d, rng),
            v: Linear::new(store, &format!("{prefix}.wv"), d, d, rng),
        }
    }

    /// `y + softmax(q(y) k(x)^T / sqrt(d)) v(x)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, y: Var) -> Result<Var> {
        let d = g.shape(y)[1];
        let q = self.q.forward(g, store, y)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
        let a = g.softmax(s)?;
        let mixed = g.matmul(a, v)?;
        g.add(y, mixed)
    }
}

/// Table-style baseline fusions. `Hfcdf` is not a baseline and is rejected here.
pub fn baseline_fusion(
    g: &mut Graph,
    store: &ParamStore,
    mode: FusionMode,
    x_tok: Var,
    y_tok: Var,
    mixer: Option<&CrossMixer>,
) -> Result<Var> {
    match mode {
        FusionMode::LinguisticOnly => Ok(y_tok),
        FusionMode::AcousticOnly => Ok(x_tok),
        FusionMode::Add => {
            let (x, y) = truncate_pair(g, x_tok, y_tok)?;
            g.add(x, y)
        }
        FusionMode::Concat => {
            let (x, y) = truncate_pair(g, x_tok, y_tok)?;
            g.concat_cols(&[x, y])
        }
        FusionMode::Transformer => {
            let mixer =
                mixer.ok_or_else(|| Error::invalid("transformer fusion needs mixer parameters"))?;
            mixer.forward(g, store, x_tok, y_tok)
        }
        FusionMode::Hfcdf => Err(Error::invalid("hfcdf is not a baseline fusion")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_example_with_k_point_seven() {
        let mut g = Graph::inference();
        let x = g.constant(row(&[1.0, 0.0])).unwrap();
        let y = g.constant(row(&[0.0, 1.0])).unwrap();
        let (xp, yp) = compensate(&mut g, x, y, &FusionConfig::paper(0.7)).unwrap();
        for v in [xp, yp] {
            let d = g.value(v).data();
            assert!((d[0] - 0.3).abs() < 1e-15 && (d[1] - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn k_extremes() {
        let mut g = Graph::inference();
        let x = g.constant(mat(3, 4, 1)).unwrap();
        let y = g.constant(mat(3, 4, 2)).unwrap();
        let (xp, yp) = compensate(&mut g, x, y, &FusionConfig::paper(0.0)).unwrap();
        assert_eq!(g.value(xp), g.value(x));
        assert_eq!(g.value(yp), g.value(x));
        let (xp, yp) = compensate(&mut g, x, y, &FusionConfig::paper(1.0)).unwrap();
        assert_eq!(g.value(xp), g.value(y));
        assert_eq!(g.value(yp), g.value(y));
    }

    #[test]
    fn mismatched_lengths_are_truncated() {
        let mut g = Graph::inference();
        let x = g.constant(mat(5, 4, 1)).unwrap();
        let y = g.constant(mat(3, 4, 2)).unwrap();
        let (xp, _) = compensate(&mut g, x, y, &FusionConfig::default()).unwrap();
        assert_eq!(g.shape(xp), &[3, 4]);
        let z = g.constant(mat(3, 5, 2)).unwrap();
        assert!(compensate(&mut g, x, z, &FusionConfig::default()).is_err());
    }

    #[test]
    fn gate_values() {
        assert!((gate(1.0, 0.0) - std::f64::consts::E / (std::f64::consts::E + 1.0)).abs() < 1e-15);
        assert!((gate(1.0, 0.0) - 0.7311).abs() < 1e-4);
        assert!((gate(0.0, 1.0) - 0.2689).abs() < 1e-4);
        assert!((gate(0.3, 0.3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dynamic_weight_of_identical_inputs_is_half() {
        let mut g = Graph::inference();
        let x = g.constant(mat(4, 3, 1)).unwrap();
        let t = g.constant(mat(4, 3, 2)).unwrap();
        let mu = dynamic_weight(&mut g, x, x, t).unwrap();
        assert_eq!(g.scalar_value(mu), 0.5);
    }

    #[test]
    fn dynamic_weight_matches_closed_form() {
        let mut g = Graph::inference();
        let x = g.constant(row(&[1.0, 0.0])).unwrap();
        let y = g.constant(row(&[0.0, 1.0])).unwrap();
        let t = g.constant(row(&[2.0, 0.0])).unwrap();
        let mu = dynamic_weight(&mut g, x, y, t).unwrap();
        assert!((g.scalar_value(mu) - gate(1.0, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn fuse_symmetric_case() {
        let mut g = Graph::inference();
        let v = g.constant(row(&[2.0, -4.0])).unwrap();
        let mu = g.constant(Tensor::scalar(0.5)).unwrap();
        let f = fuse(&mut g, v, v, mu, v).unwrap();
        assert_eq!(g.value(f.x_mmc).data(), &[1.0, -2.0, 1.0, -2.0]);
    }

    #[test]
    fn fuse_rejects_bad_gate_and_shapes() {
        let mut g = Graph::inference();
        let a = g.constant(mat(2, 3, 1)).unwrap();
        let b = g.constant(mat(3, 3, 1)).unwrap();
        let mu = g.constant(Tensor::scalar(0.5)).unwrap();
        assert!(fuse(&mut g, a, b, mu, a).is_err());
        let one = g.constant(Tensor::scalar(1.0)).unwrap();
        assert!(fuse(&mut g, a, a, one, a).is_err());
    }

    #[test]
    fn baselines_shapes_and_definitions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mixer = CrossMixer::new(&mut store, "mix", 4, &mut rng);
        let mut g = Graph::inference();
        let x = g.constant(mat(3, 4, 1)).unwrap();
        let zeros = g.constant(Tensor::zeros(vec![3, 4])).unwrap();
        let add = baseline_fusion(&mut g, &store, FusionMode::Add, x, zeros, None).unwrap();
        assert_eq!(g.value(add), g.value(x));
        let cat = baseline_fusion(&mut g, &store, FusionMode::Concat, x, zeros, None).unwrap();
        assert_eq!(g.shape(cat), &[3, 8]);
        let y = g.constant(mat(3, 4, 7)).unwrap();
        let x2 = g.constant(mat(3, 4, 9)).unwrap();
        let l1 = baseline_fusion(&mut g, &store, FusionMode::LinguisticOnly, x, y, None).unwrap();
        let l2 = baseline_fusion(&mut g, &store, FusionMode::LinguisticOnly, x2, y, None).unwrap();
        assert_eq!(g.value(l1), g.value(l2));
        let tr =
            baseline_fusion(&mut g, &store, FusionMode::Transformer, x, y, Some(&mixer)).unwrap();
        assert_eq!(g.shape(tr), &[3, 4]);
        assert!(baseline_fusion(&mut g, &store, FusionMode::Hfcdf, x, y, None).is_err());
        assert!("bogus".parse::<FusionMode>().is_err());
    }

    #[test]
    fn composed_fusion_passes_grad_check() {
        let y = mat(3, 4, 2);
        let t = mat(3, 4, 3);
        for cfg in [FusionConfig::paper(0.7), FusionConfig::variant(0.7, 0.3)] {
            let err = grad_check(
                |g, x| {
                    let yv = g.constant(y.clone())?;
                    let tv = g.constant(t.clone())?;
                    let (xp, yp) = compensate(g, x, yv, &cfg)?;
                    let mu = dynamic_weight(g, xp, yp, tv)?;
                    let f = fuse(g, xp, yp, mu, yv)?;
                    let sq = g.mul(f.x_mmc, f.x_mmc)?;
                    let w = g.constant(mat(3, 8, 4))?;
                    let sq = g.mul(sq, w)?;
                    g.sum(sq)
                },
                &mat(3, 4, 1),
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-3, "{err}");
        }
    }

    proptest! {
        #[test]
        fn paper_mode_collapses_both_sides(seed in 0u64..1000, k in 0.0f64..=1.0) {
            let mut g = Graph::inference();
            let x = g.constant(mat(3, 5, seed)).unwrap();
            let y = g.constant(mat(3, 5, seed + 1)).unwrap();
            let (xp, yp) = compensate(&mut g, x, y, &FusionConfig::paper(k)).unwrap();
            for (a, b) in g.value(xp).data().iter().zip(g.value(yp).data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let t = g.constant(mat(3, 5, seed + 2)).unwrap();
            let mu = dynamic_weight(&mut g, xp, yp, t).unwrap();
            prop_assert!((g.scalar_value(mu) - 0.5).abs() <= 1e-9);
        }

        #[test]
        fn gate_is_bounded_and_monotone(ra in -1.0f64..1.0, rt in -1.0f64..1.0, d in 1e-3f64..0.5) {
            let mu = gate(ra, rt);
            prop_assert!(mu > 0.0 && mu < 1.0);
            prop_assert!(gate(ra + d, rt) > mu);
            prop_assert!((gate(ra, rt) + gate(rt, ra) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn dynamic_weight_ignores_row_scale(seed in 0u64..1000, s in 0.1f64..10.0, r in 0usize..3) {
            let x = mat(3, 4, seed);
            let mut xs = x.clone();
            for v in &mut xs.data_mut()[r * 4..(r + 1) * 4] {
                *v *= s;
            }
            let mut g = Graph::inference();
            let xv = g.constant(x).unwrap();
            let xsv = g.constant(xs).unwrap();
            let y = g.constant(mat(3, 4, seed + 1)).unwrap();
            let t = g.constant(mat(3, 4, seed + 2)).unwrap();
            let a = dynamic_weight(&mut g, xv, y, t).unwrap();
            let b = dynamic_weight(&mut g, xsv, y, t).unwrap();
            prop_assert!((g.scalar_value(a) - g.scalar_value(b)).abs() < 1e-12);
        }

        #[test]
        fn fuse_is_homogeneous_and_first_half_is_gated_x(seed in 0u64..1000, mu in 0.01f64..0.99) {
            let x = mat(2, 3, seed);
            let y = mat(2, 3, seed + 1);
            let mut g = Graph::inference();
            let xv = g.constant(x.clone()).unwrap();
            let yv = g.constant(y.clone()).unwrap();
            let m = g.constant(Tensor::scalar(mu)).unwrap();
            let f = fuse(&mut g, xv, yv, m, yv).unwrap();
            let out = g.value(f.x_mmc).clone();
            for i in 0..2 {
                for j in 0..3 {
                    prop_assert_eq!(out.row(i)[j], mu * x.row(i)[j]);
                }
            }
            let x2 = g.scale(xv, 2.0).unwrap();
            let y2 = g.scale(yv, 2.0).unwrap();
            let f2 = fuse(&mut g, x2, y2, m, yv).unwrap();
            for (a, b) in g.value(f2.x_mmc).data().iter().zip(out.data()) {
                prop_assert!((a - 2.0 * b).abs() < 1e-12);
            }
        }

        #[test]
        fn variant_mode_keeps_sides_apart(seed in 0u64..1000) {
            let mut g = Graph::inference();
            let x = g.constant(mat(3, 5, seed)).unwrap();
            let y = g.constant(mat(3, 5, seed + 1)).unwrap();
            let (xp, yp) = compensate(&mut g, x, y, &FusionConfig::variant(0.7, 0.3)).unwrap();
            let diff: f64 = g.value(xp).data().iter().zip(g.value(yp).data()).map(|(a, b)| (a - b).abs()).sum();
            prop_assert!(diff > 1e-6);
        }
    }
}
