use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{GateProxy, MwerScorer, TrainConfig};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::ger::{
    GerConfig, GerModel, GerOutput, GerTrainMask, Memory, AUDIO_ADAPTER_PREFIX, FUSION_PREFIX,
};
use crate::hfcdf::{baseline_fusion, compensate, dynamic_weight, fuse, FusionConfig, FusionMode};
use crate::hyp_text::{wer_str, NBestList, Tokenizer};
use crate::mwer::rl_loss;
use crate::naae_asr::{AsrConfig, L1Target, NaaeModel};
use crate::speech_sim::{Utterance, Vocabulary};

/// Acoustic model, corrector and their shared parameters.
#[derive(Debug, Clone)]
pub struct System {
    pub tok: Tokenizer,
    pub asr: NaaeModel,
    pub ger: GerModel,
    pub store: ParamStore,
}

/// Acoustic embeddings and n-best list of one utterance.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x_audio: Tensor,
    pub nbest: NBestList,
}

impl Prepared {
    /// Character ids of every hypothesis, best first.
    pub fn hyps(&self) -> Vec<Vec<usize>> {
        self.nbest
            .hypotheses
            .iter()
            .map(|h| h.body().to_vec())
            .collect()
    }
}

/// What the fusion gate compares against.
#[derive(Debug, Clone, Copy)]
pub enum GateTarget<'a> {
    Truth(&'a [usize]),
    Proxy(GateProxy),
}

/// Where a training step gets its acoustic embeddings and hypotheses.
#[derive(Debug, Clone, Copy)]
pub enum AcousticSource<'a> {
    /// Frozen acoustic model: precomputed embeddings and n-best list.
    Cached(&'a Prepared),
    /// Acoustic model in the graph. The n-best list is decoded from the current
    /// parameters unless given.
    Live(Option<&'a [Vec<usize>]>),
}

/// Graph nodes of one utterance's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub llm: Var,
    pub asr: Option<Var>,
    pub rl: Option<Var>,
    pub total: Var,
}

impl System {
    /// Fresh, untrained models sized for `vocab`.
    pub fn new(vocab: &Vocabulary, seed: u64) -> Result<Self> {
        let tok = Tokenizer::new(vocab.characters.iter().copied());
        let asr_cfg = AsrConfig {
            feature_dim: vocab.feature_dim,
            frames_per_char: vocab.frames_per_char,
            ..AsrConfig::default()
        };
        let ger_cfg = GerConfig {
            enc_dim: asr_cfg.enc_dim,
            ..GerConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let asr = NaaeModel::new(asr_cfg, tok.vocab_size(), &mut store, &mut rng);
        let width = 2 * ger_cfg.d_llm;
        let ger = GerModel::new(ger_cfg, tok.vocab_size(), width, &mut store, &mut rng);
        Ok(Self {
            tok,
            asr,
            ger,
            store,
        })
    }

    /// Sets the fused width and trainable flags for a run with `cfg`.
    pub fn configure(&mut self, cfg: &TrainConfig) -> Result<()> {
        let mode = cfg.effective_fusion();
        self.ger
            .set_mmc_width(&mut self.store, mode.width(self.ger.cfg.d_llm))?;
        self.store.set_all_trainable(false);
        NaaeModel::set_mode(&mut self.store, cfg.effective_finetune());
        GerModel::set_mask(&mut self.store, cfg.ger_mask);
        if mode != FusionMode::Transformer {
            self.store.set_trainable_prefix(FUSION_PREFIX, false);
        }
        if mode == FusionMode::LinguisticOnly {
            self.store.set_trainable_prefix(AUDIO_ADAPTER_PREFIX, false);
        }
        Ok(())
    }

    /// Character ids of a transcript.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        self.tok.encode_strict(text)
    }

    /// Acoustic embeddings and beam-search n-best list under the current parameters.
    pub fn prepare(&self, frames: &Tensor, beam: usize, use_adapter: bool) -> Result<Prepared> {
        let x_audio = self
            .asr
            .audio_embeddings(&self.store, frames, use_adapter)?;
        let nbest = self
            .asr
            .decode_nbest(&self.store, &self.tok, &x_audio, beam)?;
        Ok(Prepared { x_audio, nbest })
    }

    fn nbest_mean(&self, hyps: &[Vec<usize>], len: usize) -> Result<Tensor> {
        let table = self.store.value(self.ger.text_embed);
        let d = table.cols();
        let mut sum = vec![0.0; len * d];
        let mut count = vec![0usize; len];
        for h in hyps {
            for (r, &id) in h.iter().take(len).enumerate() {
                count[r] += 1;
                for (s, v) in sum[r * d..(r + 1) * d].iter_mut().zip(table.row(id)) {
                    *s += v;
                }
            }
        }
        for (r, &c) in count.iter().enumerate() {
            let inv = 1.0 / c.max(1) as f64;
            sum[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= inv);
        }
        Tensor::new(vec![len, d], sum)
    }

    /// Cross-attention memory from acoustic embeddings and hypotheses. Returns the gate value when one is used.
    pub fn memory(
        &self,
        g: &mut Graph,
        x_audio: Var,
        hyps: &[Vec<usize>],
        target: GateTarget<'_>,
        mode: FusionMode,
        fusion: &FusionConfig,
    ) -> Result<(Memory, Option<f64>)> {
        let first = hyps.first().ok_or(Error::Empty("n-best list"))?;
        let space = [self.tok.space_id()];
        let top1: &[usize] = if first.is_empty() { &space } else { first };
        let y_tok = self.ger.embed_text(g, &self.store, top1)?;
        let x_tok = if mode == FusionMode::LinguisticOnly {
            None
        } else {
            Some(self.ger.align_audio(g, &self.store, x_audio, top1.len())?)
        };
        let ctx = self.ger.context(g, &self.store, hyps)?;
        let (x_mmc, mu) = match mode {
            FusionMode::Hfcdf => {
                let x_tok = x_tok.expect("acoustic rows present");
                let (xp, yp) = compensate(g, x_tok, y_tok, fusion)?;
                let mu = match target {
                    GateTarget::Truth(y) if !y.is_empty() => {
                        let t = self.ger.embed_text(g, &self.store, y)?;
                        dynamic_weight(g, xp, yp, t)?
                    }
                    GateTarget::Proxy(GateProxy::NbestMean) => {
                        let t = g.constant(self.nbest_mean(hyps, top1.len())?)?;
                        dynamic_weight(g, xp, yp, t)?
                    }
                    _ => g.constant(Tensor::scalar(0.5))?,
                };
                let fused = fuse(g, xp, yp, mu, ctx.rows)?;
                let mv = g.value(mu).data()[0];
                (fused.x_mmc, Some(mv))
            }
            other => {
                let x = match x_tok {
                    Some(x) => x,
                    None => y_tok,
                };
                (
                    baseline_fusion(g, &self.store, other, x, y_tok, Some(&self.ger.mixer))?,
                    None,
                )
            }
        };
        Ok((self.ger.memory(g, &self.store, x_mmc, &ctx)?, mu))
    }

    /// Greedy correction of a prepared utterance.
    pub fn correct(&self, prep: &Prepared, cfg: &TrainConfig) -> Result<GerOutput> {
        let mut g = Graph::inference();
        let hyps = prep.hyps();
        let x = g.constant(prep.x_audio.clone())?;
        let (mem, _) = self.memory(
            &mut g,
            x,
            &hyps,
            GateTarget::Proxy(cfg.gate_proxy),
            cfg.effective_fusion(),
            &cfg.fusion_config(),
        )?;
        let longest = hyps.iter().map(Vec::len).max().unwrap_or(0);
        self.ger.generate(
            &mut g,
            &self.store,
            &mem,
            &self.tok.emittable(),
            longest + 8,
        )
    }

    /// Teacher-forced log-probability of `y` under the acoustic decoder.
    pub fn asr_score(&self, g: &mut Graph, x_audio: Var, y: &[usize]) -> Result<Var> {
        let (_, targets) = crate::ger::teacher_pair(y);
        let logits = self.asr.decoder_logits(g, &self.store, x_audio, y)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.gather_cols(lp, &targets)?;
        g.sum(picked)
    }

    /// Builds the weighted objective for one training utterance.
    ///
    /// `corrector` controls whether the corrector terms are built at all.
    pub fn utterance_loss(
        &self,
        g: &mut Graph,
        utt: &Utterance,
        source: AcousticSource<'_>,
        cfg: &TrainConfig,
        corrector: bool,
    ) -> Result<LossVars> {
        let y = self.encode(&utt.text())?;
        let (x_audio, asr, hyps) = match source {
            AcousticSource::Live(fixed) => {
                let x_in = g.constant(utt.noisy_frames.clone())?;
                let x_ad = self.asr.adapt(g, &self.store, x_in)?;
                let x_audio = self.asr.encode(g, &self.store, x_ad)?;
                let anchor = match cfg.l1_target {
                    L1Target::Input => x_in,
                    L1Target::Clean => g.constant(utt.clean_frames.clone())?,
                };
                let asr = self.asr.asr_loss_from_audio(
                    g,
                    &self.store,
                    x_audio,
                    x_ad,
                    anchor,
                    &y,
                    &cfg.asr_loss(),
                )?;
                let hyps = if let Some(h) = fixed {
                    h.to_vec()
                } else if corrector {
                    let nb = self.asr.decode_nbest(
                        &self.store,
                        &self.tok,
                        g.value(x_audio),
                        cfg.beam,
                    )?;
                    nb.hypotheses.iter().map(|h| h.body().to_vec()).collect()
                } else {
                    Vec::new()
                };
                (x_audio, Some(asr), hyps)
            }
            AcousticSource::Cached(prep) => (g.constant(prep.x_audio.clone())?, None, prep.hyps()),
        };

        if !corrector {
            let asr = asr
                .ok_or_else(|| Error::invalid("acoustic-only step with a frozen acoustic model"))?;
            let zero = g.constant(Tensor::scalar(0.0))?;
            let total = g.scale(asr, cfg.alpha)?;
            return Ok(LossVars {
                llm: zero,
                asr: Some(asr),
                rl: None,
                total,
            });
        }

        let (mem, _) = self.memory(
            g,
            x_audio,
            &hyps,
            GateTarget::Truth(&y),
            cfg.effective_fusion(),
            &cfg.fusion_config(),
        )?;
        let llm = self.ger.llm_loss(g, &self.store, &mem, &y)?;

        let rl = if cfg.toggles.rl_on {
            let text = utt.text();
            let wers = hyps
                .iter()
                .map(|h| wer_str(&text, &self.tok.decode(h)))
                .collect::<Result<Vec<_>>>()?;
            if wers.iter().all(|&w| w == wers[0]) {
                // every deviation from the mean is zero: the term and its gradient vanish
                Some(g.constant(Tensor::scalar(0.0))?)
            } else {
                let scores = hyps
                    .iter()
                    .map(|h| match cfg.mwer_scorer {
                        MwerScorer::Ger => self.ger.score_hypothesis(g, &self.store, &mem, h),
                        MwerScorer::Asr => self.asr_score(g, x_audio, h),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(rl_loss(g, &scores, &wers)?)
            }
        } else {
            None
        };

        let mut total = llm;
        if let Some(a) = asr {
            let t = g.scale(a, cfg.alpha)?;
            total = g.add(total, t)?;
        }
        if let Some(r) = rl {
            let t = g.scale(r, cfg.beta)?;
            total = g.add(total, t)?;
        }
        Ok(LossVars {
            llm,
            asr,
            rl,
            total,
        })
    }
}

/// Trainable flags for text-only corrector pretraining.
pub(crate) fn pretrain_mask(store: &mut ParamStore) {
    store.set_all_trainable(false);
    GerModel::set_mask(store, GerTrainMask::Full);
    store.set_trainable_prefix(AUDIO_ADAPTER_PREFIX, false);
    store.set_trainable_prefix(FUSION_PREFIX, false);
}
