use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::GerPretrainConfig;
use super::optim::{accumulate, average, Adam};
use super::system::{pretrain_mask, System};
use crate::autodiff::{Graph, ParamStore};
use crate::error::Result;
use crate::hyp_text::Tokenizer;
use crate::naae_asr::{NaaeModel, DECODER_PREFIX, ENCODER_PREFIX};
use crate::speech_sim::{render_text, Vocabulary};

/// Settings of a pretraining phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
}

/// Random letter strings shaped like transcripts but drawn from no lexicon.
pub fn random_letter_string<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    rng: &mut R,
    words: (usize, usize),
    len: (usize, usize),
) -> String {
    let letters: Vec<char> = vocab
        .characters
        .iter()
        .copied()
        .filter(|&c| c != ' ')
        .collect();
    let n = rng.random_range(words.0..=words.1);
    (0..n)
        .map(|_| {
            let l = rng.random_range(len.0..=len.1);
            (0..l)
                .map(|_| letters[rng.random_range(0..letters.len())])
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Trains the base encoder and decoder on clean renderings of random letter strings.
///
/// The adapter is not part of the graph and stays untouched. Returns the mean loss per step.
pub fn pretrain_asr(
    model: &NaaeModel,
    store: &mut ParamStore,
    tok: &Tokenizer,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let saved = store.trainable_flags();
    store.set_all_trainable(false);
    store.set_trainable_prefix(ENCODER_PREFIX, true);
    store.set_trainable_prefix(DECODER_PREFIX, true);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.lr, cfg.warmup_steps, 5.0);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut acc = Vec::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let text = random_letter_string(vocab, &mut rng, (1, 4), (2, 7));
            let frames = render_text(&text, vocab, rng.random())?;
            let mut g = Graph::new();
            let x = g.constant(frames)?;
            let audio = model.encode(&mut g, store, x)?;
            let loss = model.ce_loss(&mut g, store, audio, &tok.encode(&text))?;
            total += g.scalar_value(loss);
            accumulate(&mut acc, g.backward(loss)?.param_grads());
        }
        average(&mut acc, cfg.batch_size);
        opt.apply(store, &acc);
        curve.push(total / cfg.batch_size as f64);
    }

    store.set_trainable_flags(&saved);
    Ok(curve)
}

/// `n` copies of `text` with random letter substitutions at `rate`, fewest edits first.
///
/// Spaces are never touched, so word boundaries survive as in acoustic n-best lists.
pub fn synthetic_nbest<R: Rng + ?Sized>(
    text: &[usize],
    tok: &Tokenizer,
    n: usize,
    rate: f64,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let letters: Vec<usize> = tok.char_ids().filter(|&c| c != tok.space_id()).collect();
    let mut out: Vec<(usize, Vec<usize>)> = (0..n)
        .map(|_| {
            let mut edits = 0;
            let h = text
                .iter()
                .map(|&c| {
                    if c != tok.space_id() && rng.random::<f64>() < rate {
                        let s = letters[rng.random_range(0..letters.len())];
                        edits += usize::from(s != c);
                        s
                    } else {
                        c
                    }
                })
                .collect();
            (edits, h)
        })
        .collect();
    out.sort_by_key(|(e, _)| *e);
    out.into_iter().map(|(_, h)| h).collect()
}

/// Trains the corrector as a text-only model: synthetic n-best lists in, clean transcript out.
///
/// The fused rows are `(y/2 | y/2)` for the top hypothesis embedding `y`, the
/// input the gated fusion produces when both halves agree and the gate is even.
pub fn pretrain_ger(
    sys: &mut System,
    vocab: &Vocabulary,
    words: (usize, usize),
    cfg: &GerPretrainConfig,
    nbest: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let saved = sys.store.trainable_flags();
    pretrain_mask(&mut sys.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E72_5052);
    let mut opt = Adam::new(cfg.lr, cfg.warmup_steps, 5.0);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut acc = Vec::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let n = rng.random_range(words.0..=words.1);
            let text = (0..n)
                .map(|_| vocab.words[rng.random_range(0..vocab.words.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let y = sys.tok.encode_strict(&text)?;
            let rate = rng.random::<f64>() * cfg.max_error_rate;
            let hyps = synthetic_nbest(&y, &sys.tok, nbest, rate, &mut rng);
            let mut g = Graph::new();
            let top = sys.ger.embed_text(&mut g, &sys.store, &hyps[0])?;
            let half = g.scale(top, 0.5)?;
            let x_mmc = g.concat_cols(&[half, half])?;
            let ctx = sys.ger.context(&mut g, &sys.store, &hyps)?;
            let mem = sys.ger.memory(&mut g, &sys.store, x_mmc, &ctx)?;
            let loss = sys.ger.llm_loss(&mut g, &sys.store, &mem, &y)?;
            total += g.scalar_value(loss);
            accumulate(&mut acc, g.backward(loss)?.param_grads());
        }
        average(&mut acc, cfg.batch_size);
        opt.apply(&mut sys.store, &acc);
        curve.push(total / cfg.batch_size as f64);
    }
    sys.store.set_trainable_flags(&saved);
    Ok(curve)
}
