//! Toy attention ASR with a noise-adaptive residual U-Net on its input features.
//!
//! Pipeline: `x_in -> x_in + adapter(x_in) -> encoder -> attention decoder`.
//! The adapter's last layer starts at zero, so a fresh adapter is the identity.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::hyp_text::{beam_search, BeamConfig, BeamModel, NBestList, Tokenizer, BOS, EOS};
use crate::nn::{log_softmax_vec, periodic_features, vec_mat, Linear};

const DOWN: ConvSpec = ConvSpec {
    kernel: 4,
    stride: 2,
    pad: 1,
};
const SAME3: ConvSpec = ConvSpec {
    kernel: 3,
    stride: 1,
    pad: 1,
};
/// Frequencies (cycles per character) of the positional attention features.
const POS_FREQS: [f64; 6] = [0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];
/// Frames are padded to a multiple of this (three stride-2 stages).
pub const PAD_MULTIPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Frozen,
    FullFt,
    AdapterOnly,
}

impl FromStr for FinetuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "full_ft" => Ok(Self::FullFt),
            "adapter_only" | "naae" => Ok(Self::AdapterOnly),
            other => Err(Error::Config(format!("unknown finetune mode {other:?}"))),
        }
    }
}

impl FinetuneMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Frozen => "frozen",
            Self::FullFt => "full_ft",
            Self::AdapterOnly => "adapter_only",
        }
    }
}

/// Which frames anchor the L1 term of the ASR loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Target {
    /// The noisy input itself.
    Input,
    /// The clean rendering of the same utterance.
    Clean,
}

impl FromStr for L1Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Self::Input),
            "clean" => Ok(Self::Clean),
            other => Err(Error::Config(format!("unknown l1 target {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsrLossConfig {
    pub lambda: f64,
    pub l1_target: L1Target,
}

impl Default for AsrLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            l1_target: L1Target::Input,
        }
    }
}

impl AsrLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrConfig {
    pub feature_dim: usize,
    pub frames_per_char: usize,
    pub enc_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub adapter_channels: usize,
    pub attn_scale: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            frames_per_char: 4,
            enc_dim: 32,
            hidden: 48,
            embed_dim: 16,
            adapter_channels: 16,
            attn_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

/// Parameter handles of the acoustic model. Values live in the shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct NaaeModel {
    pub cfg: AsrConfig,
    pub vocab_size: usize,
    down: [Conv; 3],
    up: [Conv; 3],
    conv1: Conv,
    conv2: Conv,
    dense: Linear,
    embed: ParamId,
    cell: Linear,
    query: Linear,
    key: Linear,
    out: Linear,
}

pub const ADAPTER_PREFIX: &str = "asr.adapter.";
pub const ENCODER_PREFIX: &str = "asr.encoder.";
pub const DECODER_PREFIX: &str = "asr.decoder.";
pub const ASR_PREFIX: &str = "asr.";

fn conv_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    kernel: usize,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Conv {
    Conv {
        w: store.add_normal(format!("{name}.w"), vec![kernel * cin, cout], 1.0, rng),
        b: store.add_zeros(format!("{name}.b"), vec![cout]),
    }
}

fn tconv_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
    zero: bool,
) -> Conv {
    let w = if zero {
        store.add_zeros(format!("{name}.w"), vec![cin, DOWN.kernel * cout])
    } else {
        store.add_normal(format!("{name}.w"), vec![cin, DOWN.kernel * cout], 1.0, rng)
    };
    Conv {
        w,
        b: store.add_zeros(format!("{name}.b"), vec![cout]),
    }
}

impl NaaeModel {
    /// Registers all acoustic-model parameters under `asr.` in `store`.
    pub fn new<R: Rng + ?Sized>(
        cfg: AsrConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let f = cfg.feature_dim;
        let c = cfg.adapter_channels;
        let e = cfg.enc_dim;
        let h = cfg.hidden;
        let down = [
            conv_params(store, "asr.adapter.down1", DOWN.kernel, f, c, rng),
            conv_params(store, "asr.adapter.down2", DOWN.kernel, c, c, rng),
            conv_params(store, "asr.adapter.down3", DOWN.kernel, c, c, rng),
        ];
        let up = [
            tconv_params(store, "asr.adapter.up1", c, c, rng, false),
            tconv_params(store, "asr.adapter.up2", c, c, rng, false),
            tconv_params(store, "asr.adapter.up3", c, f, rng, true),
        ];
        let conv1 = conv_params(store, "asr.encoder.conv1", SAME3.kernel, f, e, rng);
        let conv2 = conv_params(store, "asr.encoder.conv2", SAME3.kernel, e, e, rng);
        let dense = Linear::new(store, "asr.encoder.dense", e, e, rng);
        let embed = store.add_normal(
            "asr.decoder.embed",
            vec![vocab_size, cfg.embed_dim],
            1.0,
            rng,
        );
        let cell = Linear::new(store, "asr.decoder.cell", cfg.embed_dim + h, h, rng);
        let query = Linear::new(store, "asr.decoder.query", h, e, rng);
        let key = Linear::new(store, "asr.decoder.key", e, e, rng);
        let out = Linear::new(store, "asr.decoder.out", h + e + 1, vocab_size, rng);
        Self {
            cfg,
            vocab_size,
            down,
            up,
            conv1,
            conv2,
            dense,
            embed,
            cell,
            query,
            key,
            out,
        }
    }

    /// Sets trainable flags of every `asr.` parameter for `mode`.
    pub fn set_mode(store: &mut ParamStore, mode: FinetuneMode) {
        store.set_trainable_prefix(ASR_PREFIX, false);
        match mode {
            FinetuneMode::Frozen => {}
            FinetuneMode::AdapterOnly => store.set_trainable_prefix(ADAPTER_PREFIX, true),
            FinetuneMode::FullFt => store.set_trainable_prefix(ASR_PREFIX, true),
        }
    }

    /// Number of parameters that train under `mode`.
    pub fn trainable_count(store: &ParamStore, mode: FinetuneMode) -> usize {
        match mode {
            FinetuneMode::Frozen => 0,
            FinetuneMode::AdapterOnly => store.count(ADAPTER_PREFIX),
            FinetuneMode::FullFt => store.count(ASR_PREFIX),
        }
    }

    fn conv(g: &mut Graph, store: &ParamStore, c: Conv, x: Var, spec: ConvSpec) -> Result<Var> {
        let w = g.param(store, c.w);
        let b = g.param(store, c.b);
        g.conv1d(x, w, b, spec)
    }

    fn tconv(g: &mut Graph, store: &ParamStore, c: Conv, x: Var) -> Result<Var> {
        let w = g.param(store, c.w);
        let b = g.param(store, c.b);
        g.conv_transpose1d(x, w, b, DOWN)
    }

    /// `x_in + adapter(x_in)`, zero-padding the time axis to a multiple of 8 internally.
    pub fn adapt(&self, g: &mut Graph, store: &ParamStore, x_in: Var) -> Result<Var> {
        let shape = g.shape(x_in).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.feature_dim {
            return Err(Error::Shape {
                op: "adapt",
                lhs: shape,
                rhs: vec![0, self.cfg.feature_dim],
            });
        }
        let t = shape[0];
        if t == 0 {
            return Err(Error::Empty("adapter input"));
        }
        let padded_len = t.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        let x = if padded_len == t {
            x_in
        } else {
            let zeros = g.constant(Tensor::zeros(vec![padded_len - t, self.cfg.feature_dim]))?;
            g.concat_rows(&[x_in, zeros])?
        };
        let d1 = Self::conv(g, store, self.down[0], x, DOWN)?;
        let d1 = g.relu(d1)?;
        let d2 = Self::conv(g, store, self.down[1], d1, DOWN)?;
        let d2 = g.relu(d2)?;
        let d3 = Self::conv(g, store, self.down[2], d2, DOWN)?;
        let d3 = g.relu(d3)?;
        let u1 = Self::tconv(g, store, self.up[0], d3)?;
        let u1 = g.relu(u1)?;
        let u1 = g.add(u1, d2)?;
        let u2 = Self::tconv(g, store, self.up[1], u1)?;
        let u2 = g.relu(u2)?;
        let u2 = g.add(u2, d1)?;
        let residual = Self::tconv(g, store, self.up[2], u2)?;
        let y = g.add(x, residual)?;
        if padded_len == t {
            Ok(y)
        } else {
            g.slice_rows(y, 0, t)
        }
    }

    /// Frame-rate acoustic embeddings, `T x enc_dim`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = Self::conv(g, store, self.conv1, x, SAME3)?;
        let h = g.relu(h)?;
        let h = Self::conv(g, store, self.conv2, h, SAME3)?;
        let h = g.relu(h)?;
        let h = self.dense.forward(g, store, h)?;
        g.tanh(h)
    }

    fn key_position(&self, frame: usize) -> f64 {
        (frame as f64 + 0.5) / self.cfg.frames_per_char as f64 - 0.5
    }

    fn ends(&self, step: usize, frames: usize) -> bool {
        step * self.cfg.frames_per_char >= frames
    }

    fn position_keys(&self, frames: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..frames)
            .map(|j| periodic_features(self.key_position(j), &POS_FREQS))
            .collect();
        Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(vec![0, 2 * POS_FREQS.len()]))
    }

    fn position_query(&self, step: usize) -> Vec<f64> {
        periodic_features(step as f64, &POS_FREQS)
            .into_iter()
            .map(|v| v * self.cfg.attn_scale)
            .collect()
    }

    /// Teacher-forced decoder logits, one row per target token of `y` followed by EOS.
    ///
    /// `y` holds character ids without BOS/EOS.
    pub fn decoder_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_audio: Var,
        y: &[usize],
    ) -> Result<Var> {
        let frames = g.shape(x_audio)[0];
        if frames == 0 {
            return Err(Error::Empty("acoustic frames"));
        }
        let steps = y.len() + 1;
        let mut inputs = Vec::with_capacity(steps);
        inputs.push(BOS);
        inputs.extend_from_slice(y);
        let table = g.param(store, self.embed);
        let emb = g.embedding(table, &inputs)?;
        let mut h = g.constant(Tensor::zeros(vec![1, self.cfg.hidden]))?;
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let e = g.slice_rows(emb, t, t + 1)?;
            let z = g.concat_cols(&[e, h])?;
            let z = self.cell.forward(g, store, z)?;
            h = g.tanh(z)?;
            hs.push(h);
        }
        let hs = g.concat_rows(&hs)?;

        let qc = self.query.forward(g, store, hs)?;
        let qp_rows: Vec<Vec<f64>> = (0..steps).map(|t| self.position_query(t)).collect();
        let qp = g.constant(Tensor::from_rows(&qp_rows)?)?;
        let q = g.concat_cols(&[qc, qp])?;
        let kc = self.key.forward(g, store, x_audio)?;
        let kp = g.constant(self.position_keys(frames))?;
        let k = g.concat_cols(&[kc, kp])?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, x_audio)?;
        let end: Vec<f64> = (0..steps)
            .map(|t| f64::from(u8::from(self.ends(t, frames))))
            .collect();
        let end = g.constant(Tensor::new(vec![steps, 1], end)?)?;
        let feats = g.concat_cols(&[hs, ctx, end])?;
        self.out.forward(g, store, feats)
    }

    /// Teacher-forced cross-entropy of `y` (plus EOS) given acoustic embeddings.
    pub fn ce_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_audio: Var,
        y: &[usize],
    ) -> Result<Var> {
        let logits = self.decoder_logits(g, store, x_audio, y)?;
        let mut targets = y.to_vec();
        targets.push(EOS);
        g.cross_entropy(logits, &targets)
    }

    /// `lambda * CE + (1 - lambda) * L1(x_adapted, anchor)` with precomputed acoustic embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn asr_loss_from_audio(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_audio: Var,
        x_adapted: Var,
        anchor: Var,
        y: &[usize],
        cfg: &AsrLossConfig,
    ) -> Result<Var> {
        cfg.validate()?;
        if y.is_empty() {
            return Err(Error::Empty("asr target"));
        }
        let ce = self.ce_loss(g, store, x_audio, y)?;
        let l1 = g.l1_distance(x_adapted, anchor)?;
        let a = g.scale(ce, cfg.lambda)?;
        let b = g.scale(l1, 1.0 - cfg.lambda)?;
        g.add(a, b)
    }

    /// ASR loss on adapted features; the L1 anchor is `x_in`.
    pub fn asr_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_in: Var,
        x_adapted: Var,
        y: &[usize],
        cfg: &AsrLossConfig,
    ) -> Result<Var> {
        let x_audio = self.encode(g, store, x_adapted)?;
        self.asr_loss_from_audio(g, store, x_audio, x_adapted, x_in, y, cfg)
    }

    /// Adapted (when `use_adapter`) and encoded features of one utterance, without gradients.
    pub fn audio_embeddings(
        &self,
        store: &ParamStore,
        x_in: &Tensor,
        use_adapter: bool,
    ) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(x_in.clone())?;
        let x = if use_adapter {
            self.adapt(&mut g, store, x)?
        } else {
            x
        };
        let a = self.encode(&mut g, store, x)?;
        Ok(g.value(a).clone())
    }

    /// Maximum number of emitted tokens for an input of `frames` frames.
    pub fn max_decode_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.cfg.frames_per_char) + 2
    }

    /// Beam-search n-best list for precomputed acoustic embeddings.
    pub fn decode_nbest(
        &self,
        store: &ParamStore,
        tok: &Tokenizer,
        x_audio: &Tensor,
        beam: usize,
    ) -> Result<NBestList> {
        if beam == 0 {
            return Err(Error::invalid("beam must be at least 1"));
        }
        let mut runner = AsrStepper::new(self, store, x_audio)?;
        let cfg = BeamConfig {
            beam,
            max_len: self.max_decode_len(x_audio.rows()),
            allowed: tok.emittable(),
        };
        beam_search(&mut runner, &cfg)
    }
}

/// Step-wise decoder over plain vectors, used by beam search.
pub struct AsrStepper<'a> {
    model: &'a NaaeModel,
    store: &'a ParamStore,
    x_audio: &'a Tensor,
    keys: Vec<f64>,
    key_dim: usize,
}

impl<'a> AsrStepper<'a> {
    pub fn new(model: &'a NaaeModel, store: &'a ParamStore, x_audio: &'a Tensor) -> Result<Self> {
        let (frames, e) = x_audio.dims2();
        if frames == 0 {
            return Err(Error::Empty("acoustic frames"));
        }
        if e != model.cfg.enc_dim {
            return Err(Error::Shape {
                op: "decode",
                lhs: x_audio.shape().to_vec(),
                rhs: vec![frames, model.cfg.enc_dim],
            });
        }
        let kw = store.value(model.key.w);
        let kb = store.value(model.key.b).data();
        let pk = model.position_keys(frames);
        let key_dim = e + 2 * POS_FREQS.len();
        let mut keys = vec![0.0; frames * key_dim];
        let mut buf = vec![0.0; e];
        for j in 0..frames {
            vec_mat(x_audio.row(j), kw, &mut buf);
            let row = &mut keys[j * key_dim..(j + 1) * key_dim];
            for (o, (v, b)) in row.iter_mut().zip(buf.iter().zip(kb)) {
                *o = v + b;
            }
            row[e..].copy_from_slice(pk.row(j));
        }
        Ok(Self {
            model,
            store,
            x_audio,
            keys,
            key_dim,
        })
    }
}

impl BeamModel for AsrStepper<'_> {
    type State = (Vec<f64>, usize);

    fn initial(&mut self) -> Result<Self::State> {
        Ok((vec![0.0; self.model.cfg.hidden], 0))
    }

    fn step(&mut self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)> {
        let m = self.model;
        let s = self.store;
        let (h_prev, t) = state;
        let table = s.value(m.embed);
        if token >= table.rows() {
            return Err(Error::TokenOutOfRange {
                id: token,
                size: table.rows(),
            });
        }
        let mut z = table.row(token).to_vec();
        z.extend_from_slice(h_prev);
        let mut h = vec![0.0; m.cfg.hidden];
        vec_mat(&z, s.value(m.cell.w), &mut h);
        for (v, b) in h.iter_mut().zip(s.value(m.cell.b).data()) {
            *v = (*v + b).tanh();
        }

        let e = m.cfg.enc_dim;
        let mut q = vec![0.0; e];
        vec_mat(&h, s.value(m.query.w), &mut q);
        for (v, b) in q.iter_mut().zip(s.value(m.query.b).data()) {
            *v += b;
        }
        q.extend(m.position_query(*t));
        let frames = self.x_audio.rows();
        let mut scores: Vec<f64> = (0..frames)
            .map(|j| {
                self.keys[j * self.key_dim..(j + 1) * self.key_dim]
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        crate::autodiff::softmax_in_place(&mut scores);
        let mut feats = h.clone();
        let mut ctx = vec![0.0; e];
        for (j, a) in scores.iter().enumerate() {
            for (c, x) in ctx.iter_mut().zip(self.x_audio.row(j)) {
                *c += a * x;
            }
        }
        feats.extend(ctx);
        feats.push(f64::from(u8::from(m.ends(*t, frames))));
        let mut logits = vec![0.0; m.vocab_size];
        vec_mat(&feats, s.value(m.out.w), &mut logits);
        for (v, b) in logits.iter_mut().zip(s.value(m.out.b).data()) {
            *v += b;
        }
        log_softmax_vec(&mut logits);
        Ok(((h, t + 1), logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (NaaeModel, ParamStore, Tokenizer) {
        let tok = Tokenizer::new("abcdef".chars());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = NaaeModel::new(AsrConfig::default(), tok.vocab_size(), &mut store, &mut rng);
        (model, store, tok)
    }

    fn features(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![t, 16],
            (0..t * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn perturb(store: &mut ParamStore, prefix: &str, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let (m, store, _) = setup(1);
        for t in [5, 8, 13] {
            let x = features(t, t as u64);
            let mut g = Graph::inference();
            let xv = g.constant(x.clone()).unwrap();
            let y = m.adapt(&mut g, &store, xv).unwrap();
            assert_eq!(g.value(y), &x);
        }
    }

    #[test]
    fn adapter_on_zeros_is_its_response() {
        let (m, mut store, _) = setup(2);
        perturb(&mut store, ADAPTER_PREFIX, 3);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(vec![12, 16])).unwrap();
        let y = m.adapt(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[12, 16]);
        assert!(g.value(y).data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn empty_input_is_rejected() {
        let (m, store, _) = setup(1);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(vec![0, 16])).unwrap();
        assert!(m.adapt(&mut g, &store, x).is_err());
    }

    #[test]
    fn encoder_keeps_frame_rate_and_is_deterministic() {
        let (m, store, _) = setup(1);
        let x = features(10, 4);
        let a = m.audio_embeddings(&store, &x, true).unwrap();
        assert_eq!(a.shape(), &[10, 32]);
        assert_eq!(a, m.audio_embeddings(&store, &x, true).unwrap());
    }

    #[test]
    fn lambda_one_is_pure_cross_entropy() {
        let (m, store, tok) = setup(5);
        let x = features(12, 1);
        let y = tok.encode("abc");
        let mut g = Graph::inference();
        let xin = g.constant(x.clone()).unwrap();
        let xa = g.constant(features(12, 2)).unwrap();
        let cfg = AsrLossConfig {
            lambda: 1.0,
            ..Default::default()
        };
        let l = m.asr_loss(&mut g, &store, xin, xa, &y, &cfg).unwrap();
        let audio = m.encode(&mut g, &store, xa).unwrap();
        let ce = m.ce_loss(&mut g, &store, audio, &y).unwrap();
        assert_eq!(g.scalar_value(l), g.scalar_value(ce));
    }

    #[test]
    fn lambda_zero_with_identical_inputs_is_zero() {
        let (m, store, tok) = setup(5);
        let mut g = Graph::inference();
        let x = g.constant(features(8, 1)).unwrap();
        let cfg = AsrLossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let l = m
            .asr_loss(&mut g, &store, x, x, &tok.encode("ab"), &cfg)
            .unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn lambda_outside_unit_interval_is_rejected() {
        let (m, store, tok) = setup(5);
        let mut g = Graph::inference();
        let x = g.constant(features(8, 1)).unwrap();
        let cfg = AsrLossConfig {
            lambda: 1.5,
            ..Default::default()
        };
        assert!(m
            .asr_loss(&mut g, &store, x, x, &tok.encode("ab"), &cfg)
            .is_err());
    }

    #[test]
    fn loss_mixes_hand_computed_terms() {
        // one frame, two classes: CE of logits (0, ln 3) against class 0 is ln 4
        let mut g = Graph::inference();
        let logits = g
            .constant(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap())
            .unwrap();
        let ce = g.cross_entropy(logits, &[0]).unwrap();
        let a = g
            .constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let b = g
            .constant(Tensor::new(vec![1, 2], vec![0.0, 4.0]).unwrap())
            .unwrap();
        let l1 = g.l1_distance(a, b).unwrap();
        let expected = 0.5 * 4f64.ln() + 0.5 * 1.5;
        let ce_s = g.scale(ce, 0.5).unwrap();
        let l1_s = g.scale(l1, 0.5).unwrap();
        let total = g.add(ce_s, l1_s).unwrap();
        assert!((g.scalar_value(total) - expected).abs() < 1e-15);
    }

    #[test]
    fn stepper_matches_teacher_forcing() {
        let (m, mut store, tok) = setup(7);
        perturb(&mut store, ASR_PREFIX, 8);
        let x = features(16, 3);
        let audio = m.audio_embeddings(&store, &x, true).unwrap();
        let y = tok.encode("fab d");
        let mut g = Graph::inference();
        let a = g.constant(audio.clone()).unwrap();
        let logits = m.decoder_logits(&mut g, &store, a, &y).unwrap();
        let lp = g.log_softmax(logits).unwrap();
        let lp = g.value(lp).clone();
        let mut stepper = AsrStepper::new(&m, &store, &audio).unwrap();
        let mut state = stepper.initial().unwrap();
        let mut prev = BOS;
        let mut targets = y.clone();
        targets.push(EOS);
        for (t, &target) in targets.iter().enumerate() {
            let (next, row) = stepper.step(&state, prev).unwrap();
            for (a, b) in row.iter().zip(lp.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!(row[target].is_finite());
            state = next;
            prev = target;
        }
    }

    #[test]
    fn nbest_is_sorted_and_beam_one_is_greedy() {
        let (m, mut store, tok) = setup(9);
        perturb(&mut store, DECODER_PREFIX, 10);
        let audio = m.audio_embeddings(&store, &features(12, 5), false).unwrap();
        let list = m.decode_nbest(&store, &tok, &audio, 5).unwrap();
        assert!(!list.is_empty() && list.len() <= 5);
        for w in list.hypotheses.windows(2) {
            assert!(w[0].log_score >= w[1].log_score);
        }
        let one = m.decode_nbest(&store, &tok, &audio, 1).unwrap();
        assert!(list.top1().unwrap().log_score >= one.top1().unwrap().log_score);
        assert!(m.decode_nbest(&store, &tok, &audio, 0).is_err());
    }

    #[test]
    fn trainable_counts_are_ordered() {
        let (_, mut store, _) = setup(1);
        let counts: Vec<usize> = [
            FinetuneMode::Frozen,
            FinetuneMode::AdapterOnly,
            FinetuneMode::FullFt,
        ]
        .into_iter()
        .map(|mode| {
            NaaeModel::set_mode(&mut store, mode);
            assert_eq!(
                store.trainable_count(),
                NaaeModel::trainable_count(&store, mode)
            );
            store.trainable_count()
        })
        .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn asr_loss_gradient_passes_check_on_adapter() {
        let (m, mut store, tok) = setup(11);
        perturb(&mut store, ADAPTER_PREFIX, 12);
        NaaeModel::set_mode(&mut store, FinetuneMode::AdapterOnly);
        let x = features(9, 6);
        let y = tok.encode("ab");
        let cfg = AsrLossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = grad_check_params(
            &store,
            |g, s| {
                let xin = g.constant(x.clone())?;
                let xa = m.adapt(g, s, xin)?;
                m.asr_loss(g, s, xin, xa, &y, &cfg)
            },
            1e-5,
            12,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_error < 1e-3, "{report:?}");
        assert!(report.coordinates > 50);
    }
}
