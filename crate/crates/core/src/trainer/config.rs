use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::pretrain::PretrainConfig;
use crate::error::{Error, Result};
use crate::ger::GerTrainMask;
use crate::hfcdf::{FusionConfig, FusionMode};
use crate::naae_asr::{AsrLossConfig, FinetuneMode, L1Target};

/// Which component terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub naae_on: bool,
    pub hfcdf_on: bool,
    pub rl_on: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        naae_on: true,
        hfcdf_on: true,
        rl_on: true,
    };
    pub const ALL_OFF: Toggles = Toggles {
        naae_on: false,
        hfcdf_on: false,
        rl_on: false,
    };

    /// Row label with a check or cross per component.
    pub fn label(&self) -> String {
        let m = |b: bool| if b { "+" } else { "-" };
        format!(
            "naae{} hfcdf{} rl{}",
            m(self.naae_on),
            m(self.hfcdf_on),
            m(self.rl_on)
        )
    }
}

/// Whose likelihoods feed the expected-WER term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwerScorer {
    Ger,
    Asr,
}

/// Target for the fusion gate when no transcript is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateProxy {
    /// Position-wise mean embedding of the n-best hypotheses.
    NbestMean,
    /// `mu = 0.5`.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// One loop over the full weighted objective.
    Joint,
    /// Acoustic adaptation first, then the corrector on the adapted n-best lists.
    TwoStage,
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

macro_rules! from_str_via_serde {
    ($($t:ty),*) => {$(
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                parse_enum(stringify!($t), s)
            }
        }
    )*};
}
from_str_via_serde!(MwerScorer, GateProxy, Schedule);

/// Text-only pretraining of the corrector on synthetic n-best lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GerPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Upper bound of the per-utterance character corruption rate.
    pub max_error_rate: f64,
}

impl Default for GerPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            lr: 2e-3,
            warmup_steps: 50,
            max_error_rate: 0.2,
        }
    }
}

/// Everything a training run depends on besides the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub k: f64,
    pub beam: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub toggles: Toggles,
    /// Fusion used when `hfcdf_on`.
    pub fusion: FusionMode,
    /// Fusion used when `hfcdf_on` is false.
    pub fallback_fusion: FusionMode,
    pub k_a: f64,
    pub k_t: f64,
    pub paper_mode: bool,
    pub gate_proxy: GateProxy,
    pub finetune_mode: FinetuneMode,
    pub l1_target: L1Target,
    pub mwer_scorer: MwerScorer,
    pub ger_mask: GerTrainMask,
    pub schedule: Schedule,
    /// Cap on training utterances per epoch (`0` uses the whole split).
    pub train_limit: usize,
    /// Cap on utterances per test split at intermediate evaluations (`0` = all).
    pub epoch_eval_limit: usize,
    pub asr_pretrain: PretrainConfig,
    pub ger_pretrain: GerPretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.2,
            lambda: 0.5,
            k: 0.7,
            beam: 5,
            lr: 2e-4,
            warmup_steps: 100,
            epochs: 5,
            batch_size: 8,
            seed: 1,
            clip_norm: 5.0,
            toggles: Toggles::ALL_ON,
            fusion: FusionMode::Hfcdf,
            fallback_fusion: FusionMode::Concat,
            k_a: 0.7,
            k_t: 0.3,
            paper_mode: false,
            gate_proxy: GateProxy::NbestMean,
            finetune_mode: FinetuneMode::AdapterOnly,
            l1_target: L1Target::Input,
            mwer_scorer: MwerScorer::Ger,
            ger_mask: GerTrainMask::Adapter,
            schedule: Schedule::Joint,
            train_limit: 0,
            epoch_eval_limit: 0,
            asr_pretrain: PretrainConfig {
                steps: 1000,
                batch_size: 8,
                lr: 3e-3,
                warmup_steps: 20,
            },
            ger_pretrain: GerPretrainConfig::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite()
        {
            return bad(format!(
                "alpha {} and beta {} must be non-negative",
                self.alpha, self.beta
            ));
        }
        if self.beam == 0 {
            return bad("beam must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0
            || self.asr_pretrain.batch_size == 0
            || self.ger_pretrain.batch_size == 0
        {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be non-negative", self.lr));
        }
        if self.toggles.naae_on && self.finetune_mode == FinetuneMode::Frozen {
            return bad("naae_on needs finetune_mode adapter_only or full_ft".into());
        }
        if self.fallback_fusion == FusionMode::Hfcdf {
            return bad("fallback_fusion must be a baseline fusion".into());
        }
        if !(0.0..=1.0).contains(&self.ger_pretrain.max_error_rate) {
            return bad("ger_pretrain.max_error_rate must lie in [0, 1]".into());
        }
        self.asr_loss().validate()?;
        self.fusion_config().validate()
    }

    pub fn asr_loss(&self) -> AsrLossConfig {
        AsrLossConfig {
            lambda: self.lambda,
            l1_target: self.l1_target,
        }
    }

    /// Paper mode ties both compensation weights to `k`.
    pub fn fusion_config(&self) -> FusionConfig {
        if self.paper_mode {
            FusionConfig::paper(self.k)
        } else {
            FusionConfig::variant(self.k_a, self.k_t)
        }
    }

    /// Fusion in effect for this run.
    pub fn effective_fusion(&self) -> FusionMode {
        if self.toggles.hfcdf_on {
            self.fusion
        } else {
            self.fallback_fusion
        }
    }

    /// Acoustic fine-tuning regime in effect for this run.
    pub fn effective_finetune(&self) -> FinetuneMode {
        if self.toggles.naae_on {
            self.finetune_mode
        } else {
            FinetuneMode::Frozen
        }
    }

    /// Sets one key. Keys may carry a `train.` prefix; pretraining keys are
    /// `asr_pretrain.*` and `ger_pretrain.*`; fusion keys also accept `fusion.*`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        let k = k.strip_prefix("train.").unwrap_or(k);
        let v = value.trim().trim_matches('"');
        match k {
            "alpha" => self.alpha = num(k, v)?,
            "beta" => self.beta = num(k, v)?,
            "lambda" => self.lambda = num(k, v)?,
            "k" | "fusion.k" => self.k = num(k, v)?,
            "beam" => self.beam = num(k, v)?,
            "lr" => self.lr = num(k, v)?,
            "warmup_steps" => self.warmup_steps = num(k, v)?,
            "epochs" => self.epochs = num(k, v)?,
            "batch_size" => self.batch_size = num(k, v)?,
            "seed" => self.seed = num(k, v)?,
            "clip_norm" => self.clip_norm = num(k, v)?,
            "naae_on" | "toggles.naae_on" => self.toggles.naae_on = num(k, v)?,
            "hfcdf_on" | "toggles.hfcdf_on" => self.toggles.hfcdf_on = num(k, v)?,
            "rl_on" | "toggles.rl_on" => self.toggles.rl_on = num(k, v)?,
            "fusion" | "fusion.mode" => self.fusion = v.parse()?,
            "fallback_fusion" => self.fallback_fusion = v.parse()?,
            "k_a" | "fusion.k_a" => self.k_a = num(k, v)?,
            "k_t" | "fusion.k_t" => self.k_t = num(k, v)?,
            "paper_mode" | "fusion.paper_mode" => self.paper_mode = num(k, v)?,
            "gate_proxy" | "fusion.gate_proxy" => self.gate_proxy = v.parse()?,
            "finetune_mode" => self.finetune_mode = v.parse()?,
            "l1_target" => self.l1_target = v.parse()?,
            "mwer_scorer" => self.mwer_scorer = v.parse()?,
            "ger_mask" => self.ger_mask = parse_enum(k, v)?,
            "schedule" => self.schedule = v.parse()?,
            "train_limit" => self.train_limit = num(k, v)?,
            "epoch_eval_limit" => self.epoch_eval_limit = num(k, v)?,
            "asr_pretrain.steps" => self.asr_pretrain.steps = num(k, v)?,
            "asr_pretrain.batch_size" => self.asr_pretrain.batch_size = num(k, v)?,
            "asr_pretrain.lr" => self.asr_pretrain.lr = num(k, v)?,
            "asr_pretrain.warmup_steps" => self.asr_pretrain.warmup_steps = num(k, v)?,
            "ger_pretrain.steps" => self.ger_pretrain.steps = num(k, v)?,
            "ger_pretrain.batch_size" => self.ger_pretrain.batch_size = num(k, v)?,
            "ger_pretrain.lr" => self.ger_pretrain.lr = num(k, v)?,
            "ger_pretrain.warmup_steps" => self.ger_pretrain.warmup_steps = num(k, v)?,
            "ger_pretrain.max_error_rate" => self.ger_pretrain.max_error_rate = num(k, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses flat `key = value` TOML, with or without `[section]` headers.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_toml(text)?;
        Ok(cfg)
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    /// Renders the configuration as flat `key = value` lines that [`Self::from_toml`] reads back.
    pub fn to_toml(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut flat = Vec::new();
        flatten_json("", &v, &mut flat);
        flat.into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&key, v, out);
            }
        }
        serde_json::Value::String(s) => out.push((prefix.to_string(), format!("{s:?}"))),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
