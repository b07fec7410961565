//! Deterministic synthetic noisy-speech corpus.
//!
//! Utterances are rendered straight to feature frames: every character owns a
//! fixed `frames_per_char x F` template and an utterance is the concatenation
//! of its characters' templates plus a small jitter. Characters are grouped
//! into acoustic clusters whose members share most of their template, which
//! gives the recogniser realistic near-homophone confusions under noise.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Time x feature matrix of synthetic filterbank frames.
pub type FeatureMatrix = Tensor;

/// Letter pool, most frequent first; the alphabet is a prefix of it.
const LETTER_POOL: &str = "etaoinsrhldcumfpgwybvkxjqz";
/// Fixed seed for the in-domain spectral envelope, shared by every corpus.
const IN_DOMAIN_ENVELOPE_SEED: u64 = 0x0D15_EA5E;

pub const MIN_SNR_DB: f64 = 5.0;
pub const MAX_SNR_DB: f64 = 20.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub alphabet_size: usize,
    pub cluster_size: usize,
    pub cluster_spread: f64,
    /// Number of letter pairs whose templates are almost identical.
    pub twin_pairs: usize,
    pub twin_spread: f64,
    /// Fraction of vocabulary words derived from another word by swapping one
    /// character for an acoustically confusable one.
    pub confusable_fraction: f64,
    pub frames_per_char: usize,
    pub feature_dim: usize,
    pub jitter: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            train_count: 2000,
            test_count: 200,
            min_words: 2,
            max_words: 4,
            min_word_len: 3,
            max_word_len: 6,
            alphabet_size: 12,
            cluster_size: 3,
            cluster_spread: 0.12,
            twin_pairs: 1,
            twin_spread: 0.03,
            confusable_fraction: 0.3,
            frames_per_char: 4,
            feature_dim: 16,
            jitter: 0.05,
        }
    }
}

impl CorpusConfig {
    /// Applies a `key=value` override to one numeric field.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let k = k.strip_prefix("corpus.").unwrap_or(k);
        let mut value = serde_json::to_value(&*self)?;
        let slot = value
            .get_mut(k)
            .ok_or_else(|| Error::Config(format!("unknown corpus key {k:?}")))?;
        *slot = serde_json::from_str(v)
            .map_err(|_| Error::Config(format!("invalid value {v:?} for {k}")))?;
        *self = serde_json::from_value(value)
            .map_err(|_| Error::Config(format!("invalid value {v:?} for {k}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 {
            return Err(Error::invalid("train utterance count must be positive"));
        }
        if self.vocab_size == 0 || self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::invalid(
                "vocabulary size and word-count range must be positive and ordered",
            ));
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return Err(Error::invalid(
                "word length range must be positive and ordered",
            ));
        }
        if self.alphabet_size < 2
            || self.alphabet_size > LETTER_POOL.len()
            || self.cluster_size == 0
        {
            return Err(Error::invalid(
                "alphabet size must be in [2, 26] and cluster size positive",
            ));
        }
        if self.frames_per_char == 0 || self.feature_dim == 0 {
            return Err(Error::invalid(
                "frames_per_char and feature_dim must be positive",
            ));
        }
        Ok(())
    }
}

/// Word list plus the acoustic identity of every character.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    pub words: Vec<String>,
    /// Characters in id order; index 0 is the space.
    pub characters: Vec<char>,
    /// Acoustic cluster of each character (parallel to `characters`).
    pub clusters: Vec<usize>,
    pub frames_per_char: usize,
    pub feature_dim: usize,
    pub jitter: f64,
    /// Row-major `frames_per_char x feature_dim` template per character.
    pub templates: Vec<Vec<f64>>,
    /// Letter pairs rendered almost identically.
    pub twins: Vec<(char, char)>,
}

impl Vocabulary {
    /// Generates words and character templates from `seed`.
    pub fn generate(cfg: &CorpusConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_70CA);
        let letters: Vec<char> = LETTER_POOL.chars().take(cfg.alphabet_size).collect();
        let cluster_of = |i: usize| 1 + i / cfg.cluster_size;

        let mut characters = vec![' '];
        let mut clusters = vec![0];
        for (i, &c) in letters.iter().enumerate() {
            characters.push(c);
            clusters.push(cluster_of(i));
        }

        // Zipf-like letter frequencies: the pool is ordered most frequent first
        let letter_dist = WeightedIndex::new((0..letters.len()).map(|i| 1.0 / (i as f64 + 2.0)))
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut words: Vec<String> = Vec::with_capacity(cfg.vocab_size);
        let mut seen = BTreeSet::new();
        let mut attempts = 0;
        while words.len() < cfg.vocab_size {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::invalid("could not generate enough distinct words"));
            }
            let derive =
                !words.is_empty() && rng.random_bool(cfg.confusable_fraction.clamp(0.0, 1.0));
            let word = if derive {
                let base: Vec<char> = words[rng.random_range(0..words.len())].chars().collect();
                let pos = rng.random_range(0..base.len());
                let li = letters
                    .iter()
                    .position(|&c| c == base[pos])
                    .expect("letter");
                let cluster: Vec<char> = letters
                    .iter()
                    .enumerate()
                    .filter(|(j, &c)| cluster_of(*j) == cluster_of(li) && c != base[pos])
                    .map(|(_, &c)| c)
                    .collect();
                if cluster.is_empty() {
                    continue;
                }
                let mut w = base.clone();
                w[pos] = cluster[rng.random_range(0..cluster.len())];
                w.into_iter().collect::<String>()
            } else {
                let len = rng.random_range(cfg.min_word_len..=cfg.max_word_len);
                (0..len)
                    .map(|_| letters[letter_dist.sample(&mut rng)])
                    .collect()
            };
            if seen.insert(word.clone()) {
                words.push(word);
            }
        }

        let frame_len = cfg.frames_per_char * cfg.feature_dim;
        let n_clusters = clusters.iter().max().copied().unwrap_or(0) + 1;
        let centers: Vec<Vec<f64>> = (0..n_clusters)
            .map(|k| {
                let amp = if k == 0 { 0.3 } else { 1.0 };
                (0..frame_len)
                    .map(|_| amp * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut templates: Vec<Vec<f64>> = clusters
            .iter()
            .map(|&k| {
                centers[k]
                    .iter()
                    .map(|c| c + cfg.cluster_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        // twins are taken from the rarest letters, starting with the last cluster
        let mut twins = Vec::new();
        for k in (1..n_clusters).rev() {
            if twins.len() == cfg.twin_pairs {
                break;
            }
            let members: Vec<usize> = (1..characters.len())
                .filter(|&i| clusters[i] == k)
                .collect();
            if members.len() < 2 {
                continue;
            }
            let (a, b) = (members[members.len() - 2], members[members.len() - 1]);
            templates[b] = templates[a]
                .iter()
                .map(|v| v + cfg.twin_spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            twins.push((characters[a], characters[b]));
        }

        Ok(Self {
            words,
            characters,
            clusters,
            frames_per_char: cfg.frames_per_char,
            feature_dim: cfg.feature_dim,
            jitter: cfg.jitter,
            templates,
            twins,
        })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|w| w == word)
    }

    pub fn char_index(&self, c: char) -> Option<usize> {
        self.characters.iter().position(|&x| x == c)
    }

    /// Root-mean-square value over all character templates.
    pub fn template_rms(&self) -> f64 {
        let (sum, n) = self
            .templates
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
        (sum / n.max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    InDomain,
    OutOfDomain,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: Vec<String>,
    pub clean_frames: FeatureMatrix,
    pub noisy_frames: FeatureMatrix,
    pub snr_db: Option<f64>,
    pub noise_family: NoiseFamily,
}

impl Utterance {
    pub fn text(&self) -> String {
        self.transcript.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    TestInDomain,
    TestOutOfDomain,
    TestClean,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::TestInDomain,
        SplitName::TestOutOfDomain,
        SplitName::TestClean,
    ];
    pub const TESTS: [SplitName; 3] = [
        SplitName::TestInDomain,
        SplitName::TestOutOfDomain,
        SplitName::TestClean,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            SplitName::Train => "train.jsonl",
            SplitName::TestInDomain => "test_in.jsonl",
            SplitName::TestOutOfDomain => "test_out.jsonl",
            SplitName::TestClean => "test_clean.jsonl",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::TestInDomain => "test_in",
            SplitName::TestOutOfDomain => "test_out",
            SplitName::TestClean => "test_clean",
        }
    }

    pub fn noise_family(self) -> NoiseFamily {
        match self {
            SplitName::Train | SplitName::TestInDomain => NoiseFamily::InDomain,
            SplitName::TestOutOfDomain => NoiseFamily::OutOfDomain,
            SplitName::TestClean => NoiseFamily::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub splits: Vec<CorpusSplit>,
}

impl Corpus {
    pub fn split(&self, name: SplitName) -> &CorpusSplit {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .expect("corpus holds every split")
    }
}

fn transcript_chars(transcript: &[String]) -> String {
    transcript.join(" ")
}

/// Renders a transcript to clean feature frames. `seed` drives the jitter only.
pub fn render_clean(transcript: &[String], vocab: &Vocabulary, seed: u64) -> Result<FeatureMatrix> {
    if let Some(w) = transcript.iter().find(|w| !vocab.contains(w)) {
        return Err(Error::UnknownWord(w.clone()));
    }
    render_text(&transcript_chars(transcript), vocab, seed)
}

/// Renders any string over the vocabulary's character set, lexicon or not.
pub fn render_text(text: &str, vocab: &Vocabulary, seed: u64) -> Result<FeatureMatrix> {
    let f = vocab.feature_dim;
    let fpc = vocab.frames_per_char;
    let n_chars = text.chars().count();
    let sigma = vocab.jitter * vocab.template_rms();
    let jitter = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_chars * fpc * f);
    for c in text.chars() {
        let ci = vocab
            .char_index(c)
            .ok_or_else(|| Error::UnknownWord(c.to_string()))?;
        for &v in &vocab.templates[ci] {
            data.push(v + jitter.sample(&mut rng));
        }
    }
    Tensor::new(vec![n_chars * fpc, f], data)
}

fn mean_square(data: &[f64]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64
}

/// Fixed spectral envelope of the in-domain noise family.
pub fn in_domain_envelope(feature_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(IN_DOMAIN_ENVELOPE_SEED);
    let raw: Vec<f64> = (0..feature_dim)
        .map(|_| rng.random_range(0.4..1.6))
        .collect();
    // light smoothing across neighbouring bins
    (0..feature_dim)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(feature_dim - 1);
            raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Unscaled noise of the given family, shaped like `(frames, feature_dim)`.
pub fn raw_noise(family: NoiseFamily, frames: usize, feature_dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; frames * feature_dim];
    match family {
        NoiseFamily::None => {}
        NoiseFamily::InDomain => {
            let env = in_domain_envelope(feature_dim);
            for t in 0..frames {
                for f in 0..feature_dim {
                    out[t * feature_dim + f] = env[f] * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        NoiseFamily::OutOfDomain => {
            let ridges = 2.min(feature_dim);
            for _ in 0..ridges {
                let bin = rng.random_range(0..feature_dim);
                let omega = rng.random_range(0.2..1.2);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(2.0..4.0);
                for t in 0..frames {
                    out[t * feature_dim + bin] += amp * (omega * t as f64 + phase).sin();
                }
            }
            for t in 0..frames {
                if rng.random_bool(0.03) {
                    for f in 0..feature_dim {
                        out[t * feature_dim + f] += 1.5 * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
    }
    out
}

/// Additive noise mixer with a validated SNR range.
#[derive(Debug, Clone, Copy)]
pub struct NoiseMixer {
    pub min_snr_db: f64,
    pub max_snr_db: f64,
}

impl Default for NoiseMixer {
    fn default() -> Self {
        Self {
            min_snr_db: MIN_SNR_DB,
            max_snr_db: MAX_SNR_DB,
        }
    }
}

impl NoiseMixer {
    /// Adds noise scaled so that `10 log10(P_signal / P_noise) = snr_db`.
    pub fn mix(
        &self,
        clean: &FeatureMatrix,
        family: NoiseFamily,
        snr_db: f64,
        seed: u64,
    ) -> Result<FeatureMatrix> {
        if !(self.min_snr_db..=self.max_snr_db).contains(&snr_db) {
            return Err(Error::invalid(format!(
                "snr {snr_db} dB outside [{}, {}]",
                self.min_snr_db, self.max_snr_db
            )));
        }
        let (frames, f) = clean.dims2();
        let noise = raw_noise(family, frames, f, seed);
        let p_signal = mean_square(clean.data());
        let p_noise = mean_square(&noise);
        if p_noise == 0.0 || p_signal == 0.0 {
            return Ok(clean.clone());
        }
        let gain = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
        let data = clean
            .data()
            .iter()
            .zip(&noise)
            .map(|(s, n)| s + gain * n)
            .collect();
        Tensor::new(clean.shape().to_vec(), data)
    }
}

/// [`NoiseMixer::mix`] with the default 5-20 dB range.
pub fn mix_noise(
    clean: &FeatureMatrix,
    family: NoiseFamily,
    snr_db: f64,
    seed: u64,
) -> Result<FeatureMatrix> {
    NoiseMixer::default().mix(clean, family, snr_db, seed)
}

/// SNR implied by a clean/noisy pair, in dB.
pub fn measured_snr_db(clean: &FeatureMatrix, noisy: &FeatureMatrix) -> f64 {
    let residual: Vec<f64> = noisy
        .data()
        .iter()
        .zip(clean.data())
        .map(|(n, c)| n - c)
        .collect();
    10.0 * (mean_square(clean.data()) / mean_square(&residual)).log10()
}

/// Spectral flatness (geometric over arithmetic mean) of the time-averaged
/// per-feature power of a noise residual.
pub fn spectral_flatness(residual: &FeatureMatrix) -> f64 {
    let (t, f) = residual.dims2();
    if t == 0 || f == 0 {
        return 0.0;
    }
    let power: Vec<f64> = (0..f)
        .map(|j| {
            (0..t)
                .map(|i| residual.data()[i * f + j].powi(2))
                .sum::<f64>()
                / t as f64
                + 1e-12
        })
        .collect();
    let geo = (power.iter().map(|p| p.ln()).sum::<f64>() / f as f64).exp();
    let arith = power.iter().sum::<f64>() / f as f64;
    geo / arith
}

fn random_transcript(vocab: &Vocabulary, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.random_range(cfg.min_words..=cfg.max_words);
    (0..n)
        .map(|_| vocab.words[rng.random_range(0..vocab.words.len())].clone())
        .collect()
}

/// Builds one utterance of the given noise family.
pub fn make_utterance(
    id: String,
    transcript: Vec<String>,
    vocab: &Vocabulary,
    family: NoiseFamily,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    let clean = render_clean(&transcript, vocab, rng.random())?;
    let (noisy, snr_db) = match family {
        NoiseFamily::None => (clean.clone(), None),
        _ => {
            let snr = rng.random_range(MIN_SNR_DB as i64..=MAX_SNR_DB as i64) as f64;
            (mix_noise(&clean, family, snr, rng.random())?, Some(snr))
        }
    };
    Ok(Utterance {
        id,
        transcript,
        clean_frames: clean,
        noisy_frames: noisy,
        snr_db,
        noise_family: family,
    })
}

/// Generates the four splits: noisy train, in-domain test, out-of-domain test and clean test.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocabulary::generate(cfg, seed)?;
    let mut splits = Vec::with_capacity(4);
    for (k, name) in SplitName::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(k as u64 + 1),
        );
        let count = if name == SplitName::Train {
            cfg.train_count
        } else {
            cfg.test_count
        };
        let utterances = (0..count)
            .map(|i| {
                let transcript = random_transcript(&vocab, cfg, &mut rng);
                make_utterance(
                    format!("{}-{:05}", name.label(), i),
                    transcript,
                    &vocab,
                    name.noise_family(),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        splits.push(CorpusSplit { name, utterances });
    }
    Ok(Corpus {
        config: cfg.clone(),
        seed,
        vocab,
        splits,
    })
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    transcript: String,
    snr_db: Option<f64>,
    noise_family: NoiseFamily,
    clean: Vec<Vec<f64>>,
    noisy: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    config: CorpusConfig,
    vocab: Vocabulary,
}

pub const META_FILE: &str = "vocab.json";

fn matrix_from_rows(rows: &[Vec<f64>], feature_dim: usize) -> Result<FeatureMatrix> {
    if rows.is_empty() {
        return Ok(Tensor::zeros(vec![0, feature_dim]));
    }
    Tensor::from_rows(rows)
}

/// Writes `train.jsonl`, `test_in.jsonl`, `test_out.jsonl`, `test_clean.jsonl`
/// and the vocabulary metadata into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = CorpusMeta {
        seed: corpus.seed,
        config: corpus.config.clone(),
        vocab: corpus.vocab.clone(),
    };
    std::fs::write(
        dir.join(META_FILE),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    for split in &corpus.splits {
        let mut w = BufWriter::new(File::create(dir.join(split.name.file_name()))?);
        for u in &split.utterances {
            let rec = UtteranceRecord {
                id: u.id.clone(),
                transcript: u.text(),
                snr_db: u.snr_db,
                noise_family: u.noise_family,
                clean: u.clean_frames.to_rows(),
                noisy: u.noisy_frames.to_rows(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let meta: CorpusMeta =
        serde_json::from_reader(BufReader::new(File::open(dir.join(META_FILE))?))?;
    let f = meta.vocab.feature_dim;
    let mut splits = Vec::with_capacity(4);
    for name in SplitName::ALL {
        let reader = BufReader::new(File::open(dir.join(name.file_name()))?);
        let mut utterances = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UtteranceRecord = serde_json::from_str(&line)?;
            if rec.noise_family != name.noise_family() {
                return Err(Error::invalid(format!(
                    "utterance {} has noise family {:?} in split {}",
                    rec.id,
                    rec.noise_family,
                    name.label()
                )));
            }
            utterances.push(Utterance {
                id: rec.id,
                transcript: rec
                    .transcript
                    .split_whitespace()
                    .map(String::from)
                    .collect(),
                clean_frames: matrix_from_rows(&rec.clean, f)?,
                noisy_frames: matrix_from_rows(&rec.noisy, f)?,
                snr_db: rec.snr_db,
                noise_family: rec.noise_family,
            });
        }
        splits.push(CorpusSplit { name, utterances });
    }
    Ok(Corpus {
        config: meta.config,
        seed: meta.seed,
        vocab: meta.vocab,
        splits,
    })
}
