//! Generative error corrector: a small causal transformer that cross-attends
//! to the fused acoustic/text prefix and the n-best context, then emits the
//! corrected character sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::hyp_text::{BOS, EOS};
use crate::nn::{sinusoid_table, LayerNormParams, Linear};

pub const BODY_PREFIX: &str = "ger.body.";
pub const PREFIX_PREFIX: &str = "ger.prefix.";
pub const HEAD_PREFIX: &str = "ger.head.";
pub const AUDIO_ADAPTER_PREFIX: &str = "ger.audio_adapter.";
pub const FUSION_PREFIX: &str = "ger.fusion.";
pub const GER_PREFIX: &str = "ger.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GerConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Width of text and aligned acoustic embeddings.
    pub d_llm: usize,
    /// Width of acoustic encoder outputs.
    pub enc_dim: usize,
    pub max_len: usize,
}

impl Default for GerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 2,
            ffn: 128,
            d_llm: 32,
            enc_dim: 32,
            max_len: 48,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    ln1: LayerNormParams,
    self_attn: Attention,
    ln2: LayerNormParams,
    cross: Attention,
    ln3: LayerNormParams,
    ffn1: Linear,
    ffn2: Linear,
}

/// Which parameter groups train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GerTrainMask {
    /// Prefix projector, output head and acoustic alignment projection; the body stays frozen.
    Adapter,
    /// Every corrector parameter.
    Full,
}

/// Parameter handles of the corrector.
#[derive(Debug, Clone)]
pub struct GerModel {
    pub cfg: GerConfig,
    pub vocab_size: usize,
    tok_embed: ParamId,
    pub text_embed: ParamId,
    layers: Vec<Layer>,
    ln_f: LayerNormParams,
    head: Linear,
    mmc: Linear,
    ctx: Linear,
    separator: ParamId,
    pub audio_adapter: Linear,
    pub mixer: crate::hfcdf::CrossMixer,
    pos: Tensor,
}

/// n-best context rows in embedding space with their per-row positions.
#[derive(Debug, Clone)]
pub struct Context {
    pub rows: Var,
    /// Position inside its hypothesis, or `None` for separator rows.
    pub positions: Vec<Option<usize>>,
}

/// Per-layer cross-attention keys (transposed) and values, split by head.
#[derive(Debug, Clone)]
pub struct Memory {
    heads: Vec<Vec<(Var, Var)>>,
    pub rows: usize,
}

/// A decoded correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GerOutput {
    /// `BOS ... EOS`.
    pub tokens: Vec<usize>,
    pub stepwise_log_probs: Vec<f64>,
    pub total_log_prob: f64,
    pub truncated: bool,
}

impl GerOutput {
    pub fn body(&self) -> &[usize] {
        let end = self.tokens.len().saturating_sub(1);
        &self.tokens[1.min(end)..end]
    }
}

impl GerModel {
    /// Registers corrector parameters. `mmc_width` is the feature width of fused rows.
    pub fn new<R: Rng + ?Sized>(
        cfg: GerConfig,
        vocab_size: usize,
        mmc_width: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let tok_embed = store.add_normal("ger.body.tok_embed", vec![vocab_size, d], 1.0, rng);
        let text_embed =
            store.add_normal("ger.body.text_embed", vec![vocab_size, cfg.d_llm], 1.0, rng);
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("ger.body.layer{i}");
                Layer {
                    ln1: LayerNormParams::new(store, &format!("{p}.ln1"), d),
                    self_attn: Attention::new(store, &format!("{p}.self"), d, rng),
                    ln2: LayerNormParams::new(store, &format!("{p}.ln2"), d),
                    cross: Attention::new(store, &format!("{p}.cross"), d, rng),
                    ln3: LayerNormParams::new(store, &format!("{p}.ln3"), d),
                    ffn1: Linear::new(store, &format!("{p}.ffn1"), d, cfg.ffn, rng),
                    ffn2: Linear::new(store, &format!("{p}.ffn2"), cfg.ffn, d, rng),
                }
            })
            .collect();
        let ln_f = LayerNormParams::new(store, "ger.body.ln_f", d);
        let head = Linear::new(store, "ger.head", d, vocab_size, rng);
        let mmc = Linear::new(store, "ger.prefix.mmc", mmc_width, d, rng);
        let ctx = Linear::new(store, "ger.prefix.ctx", cfg.d_llm, d, rng);
        let separator = store.add_normal("ger.prefix.separator", vec![1, cfg.d_llm], 1.0, rng);
        let audio_adapter = Linear::new(store, "ger.audio_adapter", cfg.enc_dim, cfg.d_llm, rng);
        let mixer = crate::hfcdf::CrossMixer::new(store, "ger.fusion", cfg.d_llm, rng);
        let pos = sinusoid_table(cfg.max_len.max(256), d);
        Self {
            cfg,
            vocab_size,
            tok_embed,
            text_embed,
            layers,
            ln_f,
            head,
            mmc,
            ctx,
            separator,
            audio_adapter,
            mixer,
            pos,
        }
    }

    pub fn mmc_width(&self, store: &ParamStore) -> usize {
        store.value(self.mmc.w).rows()
    }

    /// Changes the fused-row width of the prefix projector.
    ///
    /// Going from `2d` to `d` folds the two halves as `(W_top + W_bottom) / 2`, so
    /// a row `y` maps exactly like the concatenation `(y/2 | y/2)` did.
    pub fn set_mmc_width(&self, store: &mut ParamStore, width: usize) -> Result<()> {
        let cur = store.value(self.mmc.w).clone();
        let (rows, cols) = cur.dims2();
        if rows == width {
            return Ok(());
        }
        let new = if rows == 2 * width {
            let mut w = vec![0.0; width * cols];
            for i in 0..width {
                for j in 0..cols {
                    w[i * cols + j] =
                        0.5 * (cur.data()[i * cols + j] + cur.data()[(i + width) * cols + j]);
                }
            }
            Tensor::new(vec![width, cols], w)?
        } else if width == 2 * rows {
            let mut data = cur.data().to_vec();
            data.extend_from_slice(cur.data());
            Tensor::new(vec![width, cols], data)?
        } else {
            return Err(Error::invalid(format!(
                "cannot resize fused width {rows} to {width}"
            )));
        };
        *store.value_mut(self.mmc.w) = new;
        Ok(())
    }

    /// Sets trainable flags on `ger.` parameters.
    pub fn set_mask(store: &mut ParamStore, mask: GerTrainMask) {
        store.set_trainable_prefix(GER_PREFIX, false);
        match mask {
            GerTrainMask::Full => store.set_trainable_prefix(GER_PREFIX, true),
            GerTrainMask::Adapter => {
                store.set_trainable_prefix(PREFIX_PREFIX, true);
                store.set_trainable_prefix(HEAD_PREFIX, true);
                store.set_trainable_prefix(AUDIO_ADAPTER_PREFIX, true);
                store.set_trainable_prefix(FUSION_PREFIX, true);
            }
        }
    }

    /// Text embeddings of character ids (`len x d_llm`).
    pub fn embed_text(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let table = g.param(store, self.text_embed);
        crate::hyp_text::embed_text(g, table, ids)
    }

    /// Pools acoustic frames onto `char_count` rows and projects them into text-embedding space.
    pub fn align_audio(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_audio: Var,
        char_count: usize,
    ) -> Result<Var> {
        let w = g.param(store, self.audio_adapter.w);
        let b = g.param(store, self.audio_adapter.b);
        crate::hyp_text::align_frames_to_chars(g, x_audio, char_count, w, b)
    }

    /// Separator-delimited text embeddings of every hypothesis.
    pub fn context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hyps: &[Vec<usize>],
    ) -> Result<Context> {
        let sep = g.param(store, self.separator);
        let mut parts = Vec::with_capacity(2 * hyps.len());
        let mut positions = Vec::new();
        for h in hyps {
            parts.push(sep);
            positions.push(None);
            if !h.is_empty() {
                parts.push(self.embed_text(g, store, h)?);
                positions.extend((0..h.len()).map(Some));
            }
        }
        if parts.is_empty() {
            return Err(Error::Empty("n-best context"));
        }
        Ok(Context {
            rows: g.concat_rows(&parts)?,
            positions,
        })
    }

    fn positions(&self, idx: impl Iterator<Item = Option<usize>>, rows: usize) -> Result<Tensor> {
        let d = self.cfg.d_model;
        let mut data = vec![0.0; rows * d];
        for (r, p) in idx.enumerate() {
            if let Some(p) = p {
                let p = p.min(self.pos.rows() - 1);
                data[r * d..(r + 1) * d].copy_from_slice(self.pos.row(p));
            }
        }
        Tensor::new(vec![rows, d], data)
    }

    /// Projects `x_mmc` and the context into decoder width and precomputes cross-attention keys/values.
    pub fn memory(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_mmc: Var,
        ctx: &Context,
    ) -> Result<Memory> {
        let n = g.shape(x_mmc)[0];
        if n == 0 {
            return Err(Error::Empty("fused prefix"));
        }
        let a = self.mmc.forward(g, store, x_mmc)?;
        let pa = g.constant(self.positions((0..n).map(Some), n)?)?;
        let a = g.add(a, pa)?;
        let c = self.ctx.forward(g, store, ctx.rows)?;
        let m = ctx.positions.len();
        let pc = g.constant(self.positions(ctx.positions.iter().copied(), m)?)?;
        let c = g.add(c, pc)?;
        let mem = g.concat_rows(&[a, c])?;
        let dh = self.cfg.d_model / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let k = layer.cross.k.forward(g, store, mem)?;
            let v = layer.cross.v.forward(g, store, mem)?;
            let mut per = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
                let kt = g.transpose(kh)?;
                let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
                per.push((kt, vh));
            }
            heads.push(per);
        }
        Ok(Memory { heads, rows: n + m })
    }

    fn attend(&self, g: &mut Graph, q: Var, kt: Var, v: Var, causal: bool) -> Result<Var> {
        let dh = self.cfg.d_model / self.cfg.heads;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        let a = if causal {
            g.masked_softmax(s, 0)?
        } else {
            g.softmax(s)?
        };
        g.matmul(a, v)
    }

    /// Logits for every position of `inputs` (which start with BOS).
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &Memory,
        inputs: &[usize],
    ) -> Result<Var> {
        let l = inputs.len();
        if l == 0 {
            return Err(Error::Empty("decoder inputs"));
        }
        let d = self.cfg.d_model;
        let dh = d / self.cfg.heads;
        let table = g.param(store, self.tok_embed);
        let e = g.embedding(table, inputs)?;
        let p = g.constant(self.positions((0..l).map(Some), l)?)?;
        let mut x = g.add(e, p)?;
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer.ln1.forward(g, store, x)?;
            let q = layer.self_attn.q.forward(g, store, h)?;
            let k = layer.self_attn.k.forward(g, store, h)?;
            let v = layer.self_attn.v.forward(g, store, h)?;
            let mut outs = Vec::with_capacity(self.cfg.heads);
            for hd in 0..self.cfg.heads {
                let qh = g.slice_cols(q, hd * dh, (hd + 1) * dh)?;
                let kh = g.slice_cols(k, hd * dh, (hd + 1) * dh)?;
                let kt = g.transpose(kh)?;
                let vh = g.slice_cols(v, hd * dh, (hd + 1) * dh)?;
                outs.push(self.attend(g, qh, kt, vh, true)?);
            }
            let o = g.concat_cols(&outs)?;
            let o = layer.self_attn.o.forward(g, store, o)?;
            x = g.add(x, o)?;

            let h = layer.ln2.forward(g, store, x)?;
            let q = layer.cross.q.forward(g, store, h)?;
            let mut outs = Vec::with_capacity(self.cfg.heads);
            for (hd, &(kt, vh)) in mem.heads[li].iter().enumerate() {
                let qh = g.slice_cols(q, hd * dh, (hd + 1) * dh)?;
                outs.push(self.attend(g, qh, kt, vh, false)?);
            }
            let o = g.concat_cols(&outs)?;
            let o = layer.cross.o.forward(g, store, o)?;
            x = g.add(x, o)?;

            let h = layer.ln3.forward(g, store, x)?;
            let f = layer.ffn1.forward(g, store, h)?;
            let f = g.relu(f)?;
            let f = layer.ffn2.forward(g, store, f)?;
            x = g.add(x, f)?;
        }
        let x = self.ln_f.forward(g, store, x)?;
        self.head.forward(g, store, x)
    }

    /// Mean teacher-forced negative log-likelihood of `y` followed by EOS.
    pub fn llm_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &Memory,
        y: &[usize],
    ) -> Result<Var> {
        if y.is_empty() {
            return Err(Error::Empty("target sequence"));
        }
        let (inputs, targets) = teacher_pair(y);
        let logits = self.logits(g, store, mem, &inputs)?;
        g.cross_entropy(logits, &targets)
    }

    /// Total teacher-forced log-probability of `y` followed by EOS, as a graph scalar.
    pub fn score_hypothesis(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &Memory,
        y: &[usize],
    ) -> Result<Var> {
        let (inputs, targets) = teacher_pair(y);
        let logits = self.logits(g, store, mem, &inputs)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.gather_cols(lp, &targets)?;
        g.sum(picked)
    }

    /// Greedy decoding over `allowed` tokens until EOS or `max_len` emitted tokens.
    pub fn generate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mem: &Memory,
        allowed: &[usize],
        max_len: usize,
    ) -> Result<GerOutput> {
        let mut tokens = vec![BOS];
        let mut steps = Vec::new();
        for _ in 0..max_len {
            let logits = self.logits(g, store, mem, &tokens)?;
            let lp = g.log_softmax(logits)?;
            let row = g.value(lp).row(tokens.len() - 1).to_vec();
            let mut best: Option<usize> = None;
            for &t in allowed {
                if best.is_none_or(|b| row[t] > row[b]) {
                    best = Some(t);
                }
            }
            let t = best.ok_or(Error::Empty("allowed tokens"))?;
            tokens.push(t);
            steps.push(row[t]);
            if t == EOS {
                return Ok(GerOutput {
                    total_log_prob: steps.iter().sum(),
                    tokens,
                    stepwise_log_probs: steps,
                    truncated: false,
                });
            }
        }
        log::debug!("generation reached {max_len} tokens without EOS");
        tokens.push(EOS);
        Ok(GerOutput {
            total_log_prob: steps.iter().sum(),
            tokens,
            stepwise_log_probs: steps,
            truncated: true,
        })
    }
}

/// `([BOS, y..], [y.., EOS])`.
pub fn teacher_pair(y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(y.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(y);
    let mut targets = y.to_vec();
    targets.push(EOS);
    (inputs, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const V: usize = 9;

    fn small_cfg() -> GerConfig {
        GerConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            ffn: 12,
            d_llm: 4,
            enc_dim: 6,
            max_len: 12,
        }
    }

    fn setup(seed: u64, cfg: GerConfig) -> (GerModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = GerModel::new(cfg.clone(), V, 2 * cfg.d_llm, &mut store, &mut rng);
        (m, store)
    }

    fn prefix(g: &mut Graph, m: &GerModel, store: &ParamStore, seed: u64) -> Memory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 2 * m.cfg.d_llm;
        let x = Tensor::new(
            vec![3, w],
            (0..3 * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let x = g.constant(x).unwrap();
        let ctx = m.context(g, store, &[vec![4, 5, 6], vec![4, 6]]).unwrap();
        m.memory(g, store, x, &ctx).unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        let (m, store) = setup(1, small_cfg());
        let mut g = Graph::inference();
        let mem = prefix(&mut g, &m, &store, 2);
        let logits = m.logits(&mut g, &store, &mem, &[BOS, 4, 5, 6]).unwrap();
        let p = g.softmax(logits).unwrap();
        for r in 0..4 {
            let s: f64 = g.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_tokens() {
        let (m, store) = setup(3, small_cfg());
        let mut g = Graph::inference();
        let mem = prefix(&mut g, &m, &store, 2);
        let a = m.logits(&mut g, &store, &mem, &[BOS, 4, 5, 6, 7]).unwrap();
        let b = m.logits(&mut g, &store, &mem, &[BOS, 4, 8, 6, 7]).unwrap();
        let (a, b) = (g.value(a).clone(), g.value(b).clone());
        for r in 0..5 {
            let same = a.row(r) == b.row(r);
            assert_eq!(same, r < 2, "row {r}");
        }
    }

    #[test]
    fn zero_prefix_untrained_model_is_near_uniform() {
        let (m, mut store) = setup(4, GerConfig::default());
        // a freshly initialised head with small weights gives near-uniform outputs
        let head_ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(HEAD_PREFIX))
            .map(|(i, _)| i)
            .collect();
        for id in head_ids {
            store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 0.01);
        }
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(vec![2, 64])).unwrap();
        let ctx = Context {
            rows: g.constant(Tensor::zeros(vec![1, 32])).unwrap(),
            positions: vec![None],
        };
        let mem = m.memory(&mut g, &store, x, &ctx).unwrap();
        let logits = m.logits(&mut g, &store, &mem, &[BOS]).unwrap();
        let p = g.softmax(logits).unwrap();
        let entropy: f64 = -g.value(p).data().iter().map(|q| q * q.ln()).sum::<f64>();
        let max = (V as f64).ln();
        assert!((entropy - max).abs() / max < 0.01, "{entropy} vs {max}");
    }

    #[test]
    fn uniform_output_loss_is_log_vocab() {
        let (m, mut store) = setup(5, small_cfg());
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(HEAD_PREFIX))
            .map(|(i, _)| i)
            .collect();
        for id in ids {
            store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference();
        let mem = prefix(&mut g, &m, &store, 1);
        let l = m.llm_loss(&mut g, &store, &mem, &[4, 5]).unwrap();
        assert!((g.scalar_value(l) - (V as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_model_has_zero_loss() {
        let (m, mut store) = setup(6, small_cfg());
        // head bias dominates: always predicts EOS
        let w = store.id("ger.head.w").unwrap();
        store
            .value_mut(w)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let b = store.id("ger.head.b").unwrap();
        let bias = store.value_mut(b).data_mut();
        bias.iter_mut().for_each(|v| *v = -800.0);
        bias[EOS] = 0.0;
        let mut g = Graph::inference();
        let mem = prefix(&mut g, &m, &store, 1);
        let out = m.generate(&mut g, &store, &mem, &[EOS, 4, 5], 5).unwrap();
        assert_eq!(out.tokens, vec![BOS, EOS]);
        assert_eq!(out.total_log_prob, 0.0);
        let s = m.score_hypothesis(&mut g, &store, &mem, &[]).unwrap();
        assert_eq!(g.scalar_value(s), 0.0);
    }

    #[test]
    fn score_matches_generation_and_loss() {
        let (m, mut store) = setup(7, small_cfg());
        let b = store.id("ger.head.b").unwrap();
        store.value_mut(b).data_mut()[EOS] = 1.5;
        let mut g = Graph::inference();
        let mem = prefix(&mut g, &m, &store, 3);
        let out = m
            .generate(&mut g, &store, &mem, &[EOS, 4, 5, 6], 12)
            .unwrap();
        assert!(!out.truncated);
        let body = out.body().to_vec();
        let s = m.score_hypothesis(&mut g, &store, &mem, &body).unwrap();
        assert!((g.scalar_value(s) - out.total_log_prob).abs() < 1e-10);
        assert!((out.stepwise_log_probs.iter().sum::<f64>() - out.total_log_prob).abs() < 1e-15);
        if !body.is_empty() {
            let l = m.llm_loss(&mut g, &store, &mem, &body).unwrap();
            let n = (body.len() + 1) as f64;
            assert!((g.scalar_value(l) * n + g.scalar_value(s)).abs() < 1e-10);
        }
    }

    #[test]
    fn scores_rank_like_brute_force_probabilities() {
        let (m, store) = setup(8, small_cfg());
        let mut g = Graph::inference();
        let mem = prefix(&mut g, &m, &store, 4);
        let cands: Vec<Vec<usize>> = vec![vec![], vec![4], vec![5], vec![4, 5], vec![5, 5]];
        // brute force: product of per-step softmax probabilities from raw logits
        let brute: Vec<f64> = cands
            .iter()
            .map(|y| {
                let (inputs, targets) = teacher_pair(y);
                let mut gg = Graph::inference();
                let mem2 = prefix(&mut gg, &m, &store, 4);
                let logits = m.logits(&mut gg, &store, &mem2, &inputs).unwrap();
                let l = gg.value(logits).clone();
                targets
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| {
                        let row = l.row(r);
                        let z: f64 = row.iter().map(|v| v.exp()).sum();
                        row[t].exp() / z
                    })
                    .product()
            })
            .collect();
        let scores: Vec<f64> = cands
            .iter()
            .map(|y| {
                let s = m.score_hypothesis(&mut g, &store, &mem, y).unwrap();
                g.scalar_value(s)
            })
            .collect();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
            idx
        };
        assert_eq!(order(&scores), order(&brute));
    }

    #[test]
    fn fused_width_fold_preserves_symmetric_input() {
        let (m, mut store) = setup(9, small_cfg());
        let d = m.cfg.d_llm;
        let y = Tensor::new(vec![2, d], (0..2 * d).map(|i| i as f64 * 0.1).collect()).unwrap();
        let half: Vec<f64> = y.data().iter().map(|v| v * 0.5).collect();
        let mut both = Vec::new();
        for r in 0..2 {
            both.extend_from_slice(&half[r * d..(r + 1) * d]);
            both.extend_from_slice(&half[r * d..(r + 1) * d]);
        }
        let mut g = Graph::inference();
        let x2 = g
            .constant(Tensor::new(vec![2, 2 * d], both).unwrap())
            .unwrap();
        let a = m.mmc.forward(&mut g, &store, x2).unwrap();
        let a = g.value(a).clone();
        m.set_mmc_width(&mut store, d).unwrap();
        let mut g = Graph::inference();
        let x1 = g.constant(y).unwrap();
        let b = m.mmc.forward(&mut g, &store, x1).unwrap();
        for (p, q) in a.data().iter().zip(g.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_mask_freezes_body() {
        let (_, mut store) = setup(10, small_cfg());
        GerModel::set_mask(&mut store, GerTrainMask::Adapter);
        for (_, p) in store.iter() {
            assert_eq!(p.trainable, !p.name.starts_with(BODY_PREFIX), "{}", p.name);
        }
    }

    #[test]
    fn loss_gradient_passes_check() {
        let (m, mut store) = setup(11, small_cfg());
        GerModel::set_mask(&mut store, GerTrainMask::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = grad_check_params(
            &store,
            |g, s| {
                let mem = prefix(g, &m, s, 5);
                m.llm_loss(g, s, &mem, &[4, 6, 5])
            },
            1e-5,
            6,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_error < 1e-3, "{report:?}");
    }
}
