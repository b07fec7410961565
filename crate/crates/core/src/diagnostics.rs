//! Finite-difference checks of every differentiable op and of the composed
//! losses at the seams between components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    grad_check_params, grad_check_with, ConvSpec, Graph, OpKind, ParamStore, Tensor, Var,
};
use crate::error::Result;
use crate::ger::GerTrainMask;
use crate::hfcdf::{compensate, dynamic_weight, fuse, FusionConfig, FusionMode};
use crate::mwer::rl_loss_row;
use crate::naae_asr::{FinetuneMode, NaaeModel};
use crate::speech_sim::{make_utterance, CorpusConfig, NoiseFamily, Utterance, Vocabulary};
use crate::trainer::{AcousticSource, System, Toggles, TrainConfig};

pub const STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

/// Component groups in sweep order.
pub const COMPONENTS: [&str; 6] = ["ops", "naae", "hfcdf", "ger", "mwer", "full"];

/// Sampled coordinates per parameter tensor in the model-level checks.
const COORDS: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub component: String,
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    /// Parameter with the largest error, for model-level checks.
    pub worst: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }

    pub fn line(&self) -> String {
        let mut s = format!(
            "{:<4} {:<5} {:<28} max rel err {:.3e} (tol {:.0e}, {} coords)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.component,
            self.name,
            self.max_error,
            self.tolerance,
            self.coordinates
        );
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            s.push_str(&format!(" worst {w}"));
        }
        s
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

fn konst(g: &mut Graph, shape: &[usize], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.constant(random(shape, &mut rng))
}

/// Reduces `v` to a scalar with fixed random weights so every output coordinate matters.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = konst(g, &shape, seed)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

struct Sweep {
    corrupt: Option<OpKind>,
    out: Vec<CheckResult>,
}

impl Sweep {
    fn check(
        &mut self,
        name: &str,
        shape: &[usize],
        seed: u64,
        f: impl Fn(&mut Graph, Var) -> Result<Var>,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let at = random(shape, &mut rng);
        let err = grad_check_with(f, &at, STEP, self.corrupt)?;
        self.out.push(CheckResult {
            component: "ops".into(),
            name: name.into(),
            max_error: err,
            tolerance: OP_TOLERANCE,
            coordinates: at.numel(),
            worst: None,
        });
        Ok(())
    }
}

/// One check per op (and per differentiable argument) on small random inputs.
pub fn op_sweep(corrupt: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut sw = Sweep {
        corrupt,
        out: Vec::new(),
    };
    let s = [3usize, 4];
    sw.check("add", &s, 1, |g, x| {
        let c = konst(g, &s, 2)?;
        let y = g.add(x, c)?;
        let y = g.add(y, x)?;
        weighted_sum(g, y, 3)
    })?;
    sw.check("sub", &s, 4, |g, x| {
        let c = konst(g, &s, 5)?;
        let y = g.sub(c, x)?;
        let y = g.sub(y, x)?;
        weighted_sum(g, y, 6)
    })?;
    sw.check("mul", &s, 7, |g, x| {
        let c = konst(g, &s, 8)?;
        let y = g.mul(x, c)?;
        let y = g.mul(y, x)?;
        weighted_sum(g, y, 9)
    })?;
    sw.check("add-row (matrix)", &s, 10, |g, x| {
        let b = konst(g, &[4], 11)?;
        let y = g.add_row(x, b)?;
        weighted_sum(g, y, 12)
    })?;
    sw.check("add-row (bias)", &[4], 13, |g, b| {
        let x = konst(g, &s, 14)?;
        let y = g.add_row(x, b)?;
        weighted_sum(g, y, 15)
    })?;
    sw.check("mul-by-scalar", &s, 16, |g, x| {
        let y = g.scale(x, -2.5)?;
        weighted_sum(g, y, 17)
    })?;
    sw.check("offset", &s, 107, |g, x| {
        let y = g.offset(x, 0.3)?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, 108)
    })?;
    sw.check("scale-by (tensor)", &s, 18, |g, x| {
        let c = g.constant(Tensor::scalar(0.7))?;
        let y = g.scale_by(x, c)?;
        weighted_sum(g, y, 19)
    })?;
    sw.check("scale-by (scalar)", &[1, 1], 20, |g, sc| {
        let x = konst(g, &s, 21)?;
        let y = g.scale_by(x, sc)?;
        weighted_sum(g, y, 22)
    })?;
    sw.check("matmul lhs", &[3, 5], 23, |g, x| {
        let b = konst(g, &[5, 2], 24)?;
        let y = g.matmul(x, b)?;
        weighted_sum(g, y, 25)
    })?;
    sw.check("matmul rhs", &[5, 2], 26, |g, b| {
        let a = konst(g, &[3, 5], 27)?;
        let y = g.matmul(a, b)?;
        weighted_sum(g, y, 28)
    })?;
    sw.check("transpose", &s, 29, |g, x| {
        let y = g.transpose(x)?;
        weighted_sum(g, y, 30)
    })?;
    sw.check("concat-last-dim", &s, 31, |g, x| {
        let c = konst(g, &[3, 2], 32)?;
        let y = g.concat_cols(&[c, x, x])?;
        weighted_sum(g, y, 33)
    })?;
    sw.check("concat-rows", &s, 34, |g, x| {
        let c = konst(g, &[2, 4], 35)?;
        let y = g.concat_rows(&[x, c, x])?;
        weighted_sum(g, y, 36)
    })?;
    sw.check("slice-rows", &s, 37, |g, x| {
        let y = g.slice_rows(x, 1, 3)?;
        weighted_sum(g, y, 38)
    })?;
    sw.check("slice-cols", &s, 39, |g, x| {
        let y = g.slice_cols(x, 1, 3)?;
        weighted_sum(g, y, 40)
    })?;
    sw.check("relu", &s, 41, |g, x| {
        let y = g.relu(x)?;
        weighted_sum(g, y, 42)
    })?;
    sw.check("tanh", &s, 43, |g, x| {
        let y = g.tanh(x)?;
        weighted_sum(g, y, 44)
    })?;
    sw.check("softmax-last-dim", &s, 45, |g, x| {
        let y = g.softmax(x)?;
        weighted_sum(g, y, 46)
    })?;
    sw.check("masked softmax", &[4, 4], 47, |g, x| {
        let y = g.masked_softmax(x, 0)?;
        weighted_sum(g, y, 48)
    })?;
    sw.check("log-softmax", &s, 49, |g, x| {
        let y = g.log_softmax(x)?;
        weighted_sum(g, y, 50)
    })?;
    sw.check("layer-norm x", &s, 51, |g, x| {
        let ga = konst(g, &[4], 52)?;
        let be = konst(g, &[4], 53)?;
        let y = g.layer_norm(x, ga, be)?;
        weighted_sum(g, y, 54)
    })?;
    sw.check("layer-norm gamma", &[4], 55, |g, ga| {
        let x = konst(g, &s, 56)?;
        let be = konst(g, &[4], 57)?;
        let y = g.layer_norm(x, ga, be)?;
        weighted_sum(g, y, 58)
    })?;
    sw.check("layer-norm beta", &[4], 59, |g, be| {
        let x = konst(g, &s, 60)?;
        let ga = konst(g, &[4], 61)?;
        let y = g.layer_norm(x, ga, be)?;
        weighted_sum(g, y, 62)
    })?;
    sw.check("mean", &s, 63, |g, x| {
        let y = g.mul(x, x)?;
        g.mean(y)
    })?;
    sw.check("sum", &s, 109, |g, x| {
        let y = g.mul(x, x)?;
        g.sum(y)
    })?;
    sw.check("l1-distance", &s, 64, |g, x| {
        let c = konst(g, &s, 65)?;
        g.l1_distance(x, c)
    })?;
    sw.check("l1-distance rhs", &s, 66, |g, x| {
        let c = konst(g, &s, 67)?;
        g.l1_distance(c, x)
    })?;
    sw.check("cross-entropy-with-logits", &[3, 5], 68, |g, x| {
        g.cross_entropy(x, &[0, 4, 2])
    })?;
    sw.check("gather-cols", &[3, 5], 69, |g, x| {
        let y = g.gather_cols(x, &[1, 1, 4])?;
        weighted_sum(g, y, 70)
    })?;
    sw.check("cosine-similarity a", &s, 71, |g, x| {
        let c = konst(g, &s, 72)?;
        let y = g.cosine(x, c)?;
        weighted_sum(g, y, 73)
    })?;
    sw.check("cosine-similarity b", &s, 74, |g, x| {
        let c = konst(g, &s, 75)?;
        let y = g.cosine(c, x)?;
        weighted_sum(g, y, 76)
    })?;
    sw.check("embedding-lookup", &[5, 3], 77, |g, t| {
        let y = g.embedding(t, &[4, 0, 4, 2])?;
        weighted_sum(g, y, 78)
    })?;
    let down = ConvSpec {
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    sw.check("conv1d x", &[8, 3], 79, |g, x| {
        let w = konst(g, &[12, 2], 80)?;
        let b = konst(g, &[2], 81)?;
        let y = g.conv1d(x, w, b, down)?;
        weighted_sum(g, y, 82)
    })?;
    sw.check("conv1d w", &[12, 2], 83, |g, w| {
        let x = konst(g, &[8, 3], 84)?;
        let b = konst(g, &[2], 85)?;
        let y = g.conv1d(x, w, b, down)?;
        weighted_sum(g, y, 86)
    })?;
    sw.check("conv1d b", &[2], 87, |g, b| {
        let x = konst(g, &[8, 3], 88)?;
        let w = konst(g, &[12, 2], 89)?;
        let y = g.conv1d(x, w, b, down)?;
        weighted_sum(g, y, 90)
    })?;
    sw.check("transpose-conv1d x", &[4, 3], 91, |g, x| {
        let w = konst(g, &[3, 8], 92)?;
        let b = konst(g, &[2], 93)?;
        let y = g.conv_transpose1d(x, w, b, down)?;
        weighted_sum(g, y, 94)
    })?;
    sw.check("transpose-conv1d w", &[3, 8], 95, |g, w| {
        let x = konst(g, &[4, 3], 96)?;
        let b = konst(g, &[2], 97)?;
        let y = g.conv_transpose1d(x, w, b, down)?;
        weighted_sum(g, y, 98)
    })?;
    sw.check("transpose-conv1d b", &[2], 99, |g, b| {
        let x = konst(g, &[4, 3], 100)?;
        let w = konst(g, &[3, 8], 101)?;
        let y = g.conv_transpose1d(x, w, b, down)?;
        weighted_sum(g, y, 102)
    })?;
    sw.check("mean-pool-segments", &[7, 3], 103, |g, x| {
        let y = g.mean_pool_segments(x, &[3, 2, 2])?;
        weighted_sum(g, y, 104)
    })?;
    sw.check("gather-rows", &[4, 3], 105, |g, x| {
        let y = g.gather_rows(x, &[0, 3, 3, 1])?;
        weighted_sum(g, y, 106)
    })?;
    Ok(sw.out)
}

/// A small random system and one noisy utterance with a hand-made n-best list
/// whose word error rates differ.
pub struct Fixture {
    pub system: System,
    pub utterance: Utterance,
    pub hyps: Vec<Vec<usize>>,
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let vocab = Vocabulary::generate(&CorpusConfig::default(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let words: Vec<String> = (0..2)
            .map(|_| vocab.words[rng.random_range(0..vocab.words.len())].clone())
            .collect();
        let utterance = make_utterance(
            "check".into(),
            words.clone(),
            &vocab,
            NoiseFamily::InDomain,
            &mut rng,
        )?;
        let mut system = System::new(&vocab, seed)?;
        // move off the initial point so no parameter sits at an exact symmetry
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
        for id in system.store.ids().collect::<Vec<_>>() {
            for v in system.store.value_mut(id).data_mut() {
                *v += 0.02 * prng.random_range(-1.0..1.0);
            }
        }
        let truth = system.encode(&utterance.text())?;
        let mut swapped = truth.clone();
        let last = swapped.len() - 1;
        swapped[last] = if swapped[last] == truth[0] {
            truth[1]
        } else {
            truth[0]
        };
        let first_word = system.encode(&words[0])?;
        let hyps = vec![swapped, truth, first_word];
        Ok(Self {
            system,
            utterance,
            hyps,
        })
    }

    fn config(&self, toggles: Toggles) -> TrainConfig {
        TrainConfig {
            toggles,
            finetune_mode: FinetuneMode::FullFt,
            ger_mask: GerTrainMask::Full,
            fusion: FusionMode::Hfcdf,
            ..TrainConfig::default()
        }
    }

    /// Store with trainable flags for `cfg`.
    fn store_for(&self, cfg: &TrainConfig) -> Result<System> {
        let mut sys = self.system.clone();
        sys.configure(cfg)?;
        Ok(sys)
    }
}

fn model_check(
    component: &str,
    name: &str,
    sys: &System,
    loss: impl Fn(&System, &mut Graph) -> Result<Var>,
    corrupt: Option<OpKind>,
    seed: u64,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = grad_check_params(
        &sys.store,
        |g, s: &ParamStore| {
            let view = System {
                store: s.clone(),
                ..sys.clone()
            };
            loss(&view, g)
        },
        STEP,
        COORDS,
        corrupt,
        &mut rng,
    )?;
    Ok(CheckResult {
        component: component.into(),
        name: name.into(),
        max_error: report.max_error,
        tolerance: COMPOSED_TOLERANCE,
        coordinates: report.coordinates,
        worst: report.worst_param,
    })
}

fn naae_checks(fx: &Fixture, corrupt: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for mode in [FinetuneMode::AdapterOnly, FinetuneMode::FullFt] {
        let mut sys = fx.system.clone();
        sys.store.set_all_trainable(false);
        NaaeModel::set_mode(&mut sys.store, mode);
        let cfg = TrainConfig {
            finetune_mode: mode,
            ..fx.config(Toggles {
                naae_on: true,
                hfcdf_on: false,
                rl_on: false,
            })
        };
        out.push(model_check(
            "naae",
            &format!("asr loss ({})", mode.name()),
            &sys,
            |s, g| {
                let l =
                    s.utterance_loss(g, &fx.utterance, AcousticSource::Live(None), &cfg, false)?;
                Ok(l.asr.expect("acoustic term"))
            },
            corrupt,
            1,
        )?);
    }
    Ok(out)
}

fn hfcdf_checks(corrupt: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let (n, d) = (4usize, 5usize);
    let mut out = Vec::new();
    for (label, cfg) in [
        ("variant", FusionConfig::variant(0.7, 0.3)),
        ("paper", FusionConfig::paper(0.7)),
    ] {
        for (arg, seed) in [("x", 11u64), ("y", 12), ("target", 13)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let at = random(&[n, d], &mut rng);
            let f = |g: &mut Graph, v: Var| {
                let x = if arg == "x" {
                    v
                } else {
                    konst(g, &[n, d], 21)?
                };
                let y = if arg == "y" {
                    v
                } else {
                    konst(g, &[n, d], 22)?
                };
                let t = if arg == "target" {
                    v
                } else {
                    konst(g, &[n, d], 23)?
                };
                let ctx = konst(g, &[3, 2 * d], 24)?;
                let (xp, yp) = compensate(g, x, y, &cfg)?;
                let mu = dynamic_weight(g, xp, yp, t)?;
                let fused = fuse(g, xp, yp, mu, ctx)?;
                weighted_sum(g, fused.x_mmc, 25)
            };
            let err = grad_check_with(f, &at, STEP, corrupt)?;
            out.push(CheckResult {
                component: "hfcdf".into(),
                name: format!("fusion {label} wrt {arg}"),
                max_error: err,
                tolerance: COMPOSED_TOLERANCE,
                coordinates: at.numel(),
                worst: None,
            });
        }
    }
    Ok(out)
}

fn ger_checks(fx: &Fixture, corrupt: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let cfg = fx.config(Toggles {
        naae_on: false,
        hfcdf_on: true,
        rl_on: false,
    });
    let sys = fx.store_for(&TrainConfig {
        ger_mask: GerTrainMask::Full,
        ..cfg.clone()
    })?;
    let check = model_check(
        "ger",
        "corrector loss",
        &sys,
        |s, g| {
            let l = s.utterance_loss(
                g,
                &fx.utterance,
                AcousticSource::Live(Some(&fx.hyps)),
                &cfg,
                true,
            )?;
            Ok(l.llm)
        },
        corrupt,
        2,
    )?;
    Ok(vec![check])
}

fn mwer_checks(corrupt: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let wers = [0.0, 0.25, 0.5, 1.0, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let at = random(&[1, wers.len()], &mut rng);
    let err = grad_check_with(|g, x| rl_loss_row(g, x, &wers), &at, STEP, corrupt)?;
    Ok(vec![CheckResult {
        component: "mwer".into(),
        name: "expected wer deviation".into(),
        max_error: err,
        tolerance: OP_TOLERANCE,
        coordinates: at.numel(),
        worst: None,
    }])
}

fn full_checks(fx: &Fixture, corrupt: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let cfg = fx.config(Toggles::ALL_ON);
    let sys = fx.store_for(&cfg)?;
    let check = model_check(
        "full",
        "weighted objective",
        &sys,
        |s, g| {
            let l = s.utterance_loss(
                g,
                &fx.utterance,
                AcousticSource::Live(Some(&fx.hyps)),
                &cfg,
                true,
            )?;
            Ok(l.total)
        },
        corrupt,
        3,
    )?;
    Ok(vec![check])
}

/// Runs the sweep for every component in `only` (all when `None`).
///
/// `corrupt` breaks the backward rule of one op kind, as a negative control.
pub fn run(only: Option<&[String]>, corrupt: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let wanted = |c: &str| only.is_none_or(|o| o.iter().any(|w| w == c));
    let mut out = Vec::new();
    if wanted("ops") {
        out.extend(op_sweep(corrupt)?);
    }
    let needs_fixture = ["naae", "ger", "full"].iter().any(|c| wanted(c));
    let fx = if needs_fixture {
        Some(Fixture::new(7)?)
    } else {
        None
    };
    if let (true, Some(fx)) = (wanted("naae"), &fx) {
        out.extend(naae_checks(fx, corrupt)?);
    }
    if wanted("hfcdf") {
        out.extend(hfcdf_checks(corrupt)?);
    }
    if let (true, Some(fx)) = (wanted("ger"), &fx) {
        out.extend(ger_checks(fx, corrupt)?);
    }
    if wanted("mwer") {
        out.extend(mwer_checks(corrupt)?);
    }
    if let (true, Some(fx)) = (wanted("full"), &fx) {
        out.extend(full_checks(fx, corrupt)?);
    }
    Ok(out)
}
