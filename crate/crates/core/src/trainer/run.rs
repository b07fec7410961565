use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Schedule, Toggles, TrainConfig};
use super::optim::{accumulate, average, Adam};
use super::pretrain::{pretrain_asr, pretrain_ger};
use super::system::{AcousticSource, Prepared, System};
use crate::autodiff::Graph;
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{CaseRecord, EvalReport, SplitEval};
use crate::naae_asr::{FinetuneMode, NaaeModel, ASR_PREFIX};
use crate::speech_sim::{Corpus, SplitName, Vocabulary};

/// Component losses of one step or averaged over an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub llm: f64,
    pub asr: f64,
    pub rl: f64,
    pub total: f64,
}

/// `llm + alpha * asr + beta * rl`.
pub fn total_loss(llm: f64, asr: f64, rl: f64, cfg: &TrainConfig) -> Result<f64> {
    if cfg.alpha < 0.0 || cfg.beta < 0.0 {
        return Err(Error::Config(format!(
            "alpha {} and beta {} must be non-negative",
            cfg.alpha, cfg.beta
        )));
    }
    Ok(llm + cfg.alpha * asr + cfg.beta * rl)
}

impl LossBreakdown {
    pub fn new(llm: f64, asr: f64, rl: f64, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            llm,
            asr,
            rl,
            total: total_loss(llm, asr, rl, cfg)?,
        })
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.llm += o.llm;
        self.asr += o.asr;
        self.rl += o.rl;
        self.total += o.total;
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            llm: self.llm * s,
            asr: self.asr * s,
            rl: self.rl * s,
            total: self.total * s,
        }
    }
}

/// Pooled word error rates of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitWer {
    pub split: SplitName,
    pub asr: f64,
    pub corrected: f64,
}

fn summarize(r: &EvalReport) -> Vec<SplitWer> {
    r.splits
        .iter()
        .map(|s| SplitWer {
            split: s.split,
            asr: s.asr_pooled,
            corrected: s.ger_pooled,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: String,
    pub steps: usize,
    pub clipped_steps: usize,
    /// Mean over the epoch's utterances.
    pub loss: LossBreakdown,
    pub wer: Vec<SplitWer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub asr_trainable: usize,
    pub ger_trainable: usize,
}

impl ParamCounts {
    pub fn of(store: &crate::autodiff::ParamStore) -> Self {
        let tr = |prefix: &str| {
            store
                .iter()
                .filter(|(_, p)| p.trainable && p.name.starts_with(prefix))
                .map(|(_, p)| p.value.numel())
                .sum()
        };
        Self {
            total: store.total_count(),
            trainable: store.trainable_count(),
            asr_trainable: tr(ASR_PREFIX),
            ger_trainable: tr(crate::ger::GER_PREFIX),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub asr_loss: f64,
    pub ger_loss: f64,
}

/// Everything logged by a run. Wall time is kept out of the serialized form so
/// reports of identical runs compare equal byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub params: ParamCounts,
    pub pretrain: PretrainSummary,
    pub initial_wer: Vec<SplitWer>,
    pub epochs: Vec<EpochLog>,
    pub final_eval: Option<EvalReport>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_wer(&self, split: SplitName) -> Option<&SplitEval> {
        self.final_eval.as_ref().and_then(|e| e.split(split))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Per-epoch losses and word error rates as a plain-text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:<9} {:>10} {:>10} {:>10} {:>10}  wer asr/corrected (%)",
            "epoch", "stage", "L_total", "L_LLM", "L_ASR", "L_RL"
        );
        let wer = |w: &[SplitWer]| {
            w.iter()
                .map(|s| {
                    format!(
                        "{} {:.2}/{:.2}",
                        s.split.label(),
                        100.0 * s.asr,
                        100.0 * s.corrected
                    )
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let _ = writeln!(
            out,
            "{:>5} {:<9} {:>43}  {}",
            0,
            "init",
            "",
            wer(&self.initial_wer)
        );
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{:>5} {:<9} {:>10.5} {:>10.5} {:>10.5} {:>10.5}  {}",
                e.epoch,
                e.stage,
                e.loss.total,
                e.loss.llm,
                e.loss.asr,
                e.loss.rl,
                wer(&e.wer)
            );
        }
        let _ = writeln!(
            out,
            "parameters: {} total, {} trainable ({} acoustic, {} corrector); {:.1} s",
            self.params.total,
            self.params.trainable,
            self.params.asr_trainable,
            self.params.ger_trainable,
            self.wall_seconds
        );
        out
    }
}

/// State carried in checkpoint metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epochs_done: usize,
    pub report: TrainReport,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub system: System,
    pub optimizer: Adam,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            epochs_done: self.report.epochs.len(),
            report: self.report.clone(),
        };
        Ok(checkpoint::encode(
            &self.system.store,
            Some(&self.optimizer),
            &serde_json::to_string(&meta)?,
        ))
    }
}

/// Rebuilds the system a checkpoint was written from, with its run's trainable flags.
pub fn system_from_checkpoint(
    ck: &Checkpoint,
    vocab: &Vocabulary,
) -> Result<(System, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&ck.meta)?;
    let cfg = &meta.report.config;
    let mut sys = System::new(vocab, cfg.seed)?;
    sys.configure(cfg)?;
    let loaded = sys.store.load_from(&ck.params)?;
    if loaded != sys.store.len() || ck.params.len() != sys.store.len() {
        return Err(Error::Checkpoint(
            "checkpoint parameters do not match the model".into(),
        ));
    }
    Ok((sys, meta))
}

/// Builds the models for `cfg.seed` and runs both pretraining phases.
pub fn pretrained_system(corpus: &Corpus, cfg: &TrainConfig) -> Result<(System, PretrainSummary)> {
    cfg.validate()?;
    let mut sys = System::new(&corpus.vocab, cfg.seed)?;
    let asr = pretrain_asr(
        &sys.asr,
        &mut sys.store,
        &sys.tok,
        &corpus.vocab,
        &cfg.asr_pretrain,
        cfg.seed,
    )?;
    let words = (corpus.config.min_words, corpus.config.max_words);
    let ger = pretrain_ger(
        &mut sys,
        &corpus.vocab,
        words,
        &cfg.ger_pretrain,
        cfg.beam,
        cfg.seed,
    )?;
    let tail = |c: &[f64]| {
        let n = c.len().min(50);
        if n == 0 {
            0.0
        } else {
            c[c.len() - n..].iter().sum::<f64>() / n as f64
        }
    };
    Ok((
        sys,
        PretrainSummary {
            asr_loss: tail(&asr),
            ger_loss: tail(&ger),
        },
    ))
}

fn limited<T>(v: &[T], limit: usize) -> &[T] {
    if limit == 0 {
        v
    } else {
        &v[..limit.min(v.len())]
    }
}

/// Decodes and corrects the test splits.
pub fn evaluate(
    sys: &System,
    corpus: &Corpus,
    cfg: &TrainConfig,
    limit: usize,
) -> Result<EvalReport> {
    let use_adapter = cfg.toggles.naae_on;
    let mut splits = Vec::new();
    for name in SplitName::TESTS {
        let utts = limited(&corpus.split(name).utterances, limit);
        let mut cases = Vec::with_capacity(utts.len());
        for u in utts {
            let prep = sys.prepare(&u.noisy_frames, cfg.beam, use_adapter)?;
            let top1 = prep
                .nbest
                .top1()
                .map(|h| sys.tok.decode(&h.tokens))
                .unwrap_or_default();
            let out = sys.correct(&prep, cfg)?;
            cases.push(CaseRecord::new(
                u.id.clone(),
                u.text(),
                top1,
                sys.tok.decode(&out.tokens),
            )?);
        }
        splits.push(SplitEval::from_cases(name, cases)?);
    }
    Ok(EvalReport { splits })
}

/// Hooks and starting points for [`train_with`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Already pretrained models (skips pretraining).
    pub pretrained: Option<(System, PretrainSummary)>,
    /// Continue from a checkpoint written by an earlier run with the same config.
    pub resume: Option<Checkpoint>,
    /// Called after every epoch with the current state.
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<&'a mut dyn FnMut(&TrainOutcome) -> Result<()>>,
    /// Skip the final full evaluation.
    pub skip_final_eval: bool,
    /// Stop once this many epochs are done in total, without the final
    /// evaluation. The last checkpoint can be resumed.
    pub stop_after: Option<usize>,
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, cfg, RunOptions::default())
}

struct Phase {
    stage: &'static str,
    train_asr: bool,
    corrector: bool,
}

fn phases(cfg: &TrainConfig) -> Vec<Phase> {
    let naae = cfg.effective_finetune() != FinetuneMode::Frozen;
    let joint = Phase {
        stage: "joint",
        train_asr: naae,
        corrector: true,
    };
    let mut out = Vec::new();
    if cfg.schedule == Schedule::TwoStage && naae {
        for _ in 0..cfg.epochs {
            out.push(Phase {
                stage: "acoustic",
                train_asr: true,
                corrector: false,
            });
        }
        for _ in 0..cfg.epochs {
            out.push(Phase {
                stage: "corrector",
                train_asr: false,
                corrector: true,
            });
        }
    } else {
        for _ in 0..cfg.epochs {
            out.push(Phase { ..joint });
        }
    }
    out
}

/// Runs the full schedule of `cfg` on the train split and evaluates the test splits.
pub fn train_with(
    corpus: &Corpus,
    cfg: &TrainConfig,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let train_utts = &corpus.split(SplitName::Train).utterances;
    if train_utts.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let RunOptions {
        pretrained,
        resume,
        mut on_epoch,
        skip_final_eval,
        stop_after,
    } = opts;

    let (mut sys, summary, mut opt, mut report, done) = match resume {
        Some(ck) => {
            let (sys, meta) = system_from_checkpoint(&ck, &corpus.vocab)?;
            if meta.report.config != *cfg {
                return Err(Error::Checkpoint(
                    "checkpoint was written with a different config".into(),
                ));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            (
                sys,
                meta.report.pretrain,
                opt,
                meta.report,
                meta.epochs_done,
            )
        }
        None => {
            let (mut sys, summary) = match pretrained {
                Some(p) => p,
                None => pretrained_system(corpus, cfg)?,
            };
            sys.configure(cfg)?;
            let initial = evaluate(&sys, corpus, cfg, cfg.epoch_eval_limit)?;
            let report = TrainReport {
                config: cfg.clone(),
                params: ParamCounts::of(&sys.store),
                pretrain: summary,
                initial_wer: summarize(&initial),
                epochs: Vec::new(),
                final_eval: None,
                wall_seconds: 0.0,
            };
            (
                sys,
                summary,
                Adam::new(cfg.lr, cfg.warmup_steps, cfg.clip_norm),
                report,
                0,
            )
        }
    };
    let _ = summary;

    let plan = phases(cfg);
    let flags = sys.store.trainable_flags();
    let use_adapter = cfg.toggles.naae_on;
    let subset = limited(train_utts, cfg.train_limit);
    let mut cache: Option<Vec<Prepared>> = None;

    for (ei, phase) in plan.iter().enumerate().skip(done) {
        let epoch = ei + 1;
        sys.store.set_trainable_flags(&flags);
        if !phase.train_asr {
            sys.store.set_trainable_prefix(ASR_PREFIX, false);
        }
        if !phase.corrector {
            sys.store
                .set_trainable_prefix(crate::ger::GER_PREFIX, false);
        }
        if !phase.train_asr && cache.is_none() {
            cache = Some(
                subset
                    .iter()
                    .map(|u| sys.prepare(&u.noisy_frames, cfg.beam, use_adapter))
                    .collect::<Result<_>>()?,
            );
        }

        let mut order: Vec<usize> = (0..subset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_mul(0x2545_F491_4F6C_DD1D)
                .wrapping_add(epoch as u64),
        );
        order.shuffle(&mut rng);

        let mut sum = LossBreakdown::default();
        let (mut steps, mut clipped) = (0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Vec::new();
            for &i in batch {
                let u = &subset[i];
                let source = match (&cache, phase.train_asr) {
                    (Some(c), false) => AcousticSource::Cached(&c[i]),
                    _ => AcousticSource::Live(None),
                };
                let mut g = Graph::new();
                // the graph rejects the first non-finite node with its op name
                let vars = sys.utterance_loss(&mut g, u, source, cfg, phase.corrector)?;
                let val =
                    |v: Option<crate::autodiff::Var>| v.map(|v| g.scalar_value(v)).unwrap_or(0.0);
                let parts = if phase.corrector {
                    LossBreakdown::new(g.scalar_value(vars.llm), val(vars.asr), val(vars.rl), cfg)?
                } else {
                    let a = val(vars.asr);
                    LossBreakdown {
                        llm: 0.0,
                        asr: a,
                        rl: 0.0,
                        total: cfg.alpha * a,
                    }
                };
                let logged = g.scalar_value(vars.total);
                if (logged - parts.total).abs() > 1e-10 {
                    return Err(Error::invalid(format!(
                        "logged loss {logged} differs from weighted sum {}",
                        parts.total
                    )));
                }
                sum.add(&parts);
                accumulate(&mut acc, g.backward(vars.total)?.param_grads());
            }
            average(&mut acc, batch.len());
            let info = opt.apply(&mut sys.store, &acc);
            if info.clipped {
                clipped += 1;
                log::info!(
                    "step {}: gradient norm {:.3} clipped",
                    opt.step,
                    info.grad_norm
                );
            }
            steps += 1;
        }
        if !phase.train_asr && ei + 1 < plan.len() && plan[ei + 1].train_asr {
            cache = None;
        }
        sys.store.set_trainable_flags(&flags);

        let eval = evaluate(&sys, corpus, cfg, cfg.epoch_eval_limit)?;
        report.epochs.push(EpochLog {
            epoch,
            stage: phase.stage.to_string(),
            steps,
            clipped_steps: clipped,
            loss: sum.scaled(1.0 / subset.len() as f64),
            wer: summarize(&eval),
        });
        log::info!(
            "epoch {epoch} ({}) done: loss {:.5}",
            phase.stage,
            report.epochs.last().map(|e| e.loss.total).unwrap_or(0.0)
        );
        if let Some(cb) = on_epoch.as_deref_mut() {
            let snapshot = TrainOutcome {
                system: sys.clone(),
                optimizer: opt.clone(),
                report: report.clone(),
            };
            cb(&snapshot)?;
        }
        if stop_after.is_some_and(|n| epoch >= n) {
            break;
        }
    }

    let finished = report.epochs.len() == plan.len();
    if finished && !skip_final_eval {
        report.final_eval = Some(evaluate(&sys, corpus, cfg, 0)?);
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        system: sys,
        optimizer: opt,
        report,
    })
}

/// The seven toggle rows: all off, each component alone, NAAE with HFCDF,
/// HFCDF with RL, and all on.
pub const ABLATION_ROWS: [Toggles; 7] = [
    Toggles::ALL_OFF,
    Toggles {
        naae_on: true,
        hfcdf_on: false,
        rl_on: false,
    },
    Toggles {
        naae_on: false,
        hfcdf_on: true,
        rl_on: false,
    },
    Toggles {
        naae_on: false,
        hfcdf_on: false,
        rl_on: true,
    },
    Toggles {
        naae_on: true,
        hfcdf_on: true,
        rl_on: false,
    },
    Toggles {
        naae_on: false,
        hfcdf_on: true,
        rl_on: true,
    },
    Toggles::ALL_ON,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub initial_wer: Vec<SplitWer>,
    pub final_wer: Vec<SplitWer>,
    pub params: ParamCounts,
    /// Training time of this row, pretraining excluded (summed over seeds in seed means).
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl AblationRow {
    pub fn corrected(&self, split: SplitName) -> Option<f64> {
        self.final_wer
            .iter()
            .find(|w| w.split == split)
            .map(|w| w.corrected)
    }
}

/// Trains one run per row of `rows` from a shared pretrained starting point.
pub fn ablation_matrix(
    corpus: &Corpus,
    base: &TrainConfig,
    rows: &[Toggles],
) -> Result<Vec<AblationRow>> {
    let (rows, _) = ablation_matrix_timed(corpus, base, rows)?;
    Ok(rows)
}

/// [`ablation_matrix`] that also returns the shared pretraining time in seconds.
pub fn ablation_matrix_timed(
    corpus: &Corpus,
    base: &TrainConfig,
    rows: &[Toggles],
) -> Result<(Vec<AblationRow>, f64)> {
    let started = Instant::now();
    let pre = pretrained_system(corpus, base)?;
    let pretrain_seconds = started.elapsed().as_secs_f64();
    let rows = rows
        .iter()
        .map(|&t| {
            let cfg = TrainConfig {
                toggles: t,
                ..base.clone()
            };
            let out = train_with(
                corpus,
                &cfg,
                RunOptions {
                    pretrained: Some(pre.clone()),
                    ..RunOptions::default()
                },
            )?;
            Ok(AblationRow {
                toggles: t,
                initial_wer: out.report.initial_wer.clone(),
                final_wer: out
                    .report
                    .final_eval
                    .as_ref()
                    .map(summarize)
                    .unwrap_or_default(),
                params: out.report.params,
                wall_seconds: out.report.wall_seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, pretrain_seconds))
}

/// Plain-text ablation table with pooled corrected WER (%) per split.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>5} {:>6} {:>8}", "NAAE", "HFCDF", "RL-loss");
    if let Some(r) = rows.first() {
        for w in &r.final_wer {
            let _ = write!(out, " {:>12}", w.split.label());
        }
    }
    out.push('\n');
    let mark = |b: bool| if b { "x" } else { "-" };
    for r in rows {
        let _ = write!(
            out,
            "{:>5} {:>6} {:>8}",
            mark(r.toggles.naae_on),
            mark(r.toggles.hfcdf_on),
            mark(r.toggles.rl_on)
        );
        for w in &r.final_wer {
            let _ = write!(out, " {:>11.2}%", 100.0 * w.corrected);
        }
        out.push('\n');
    }
    out
}

/// Trainable acoustic parameters under each fine-tuning regime.
pub fn finetune_counts(sys: &System) -> Vec<(FinetuneMode, usize)> {
    [
        FinetuneMode::Frozen,
        FinetuneMode::AdapterOnly,
        FinetuneMode::FullFt,
    ]
    .into_iter()
    .map(|m| (m, NaaeModel::trainable_count(&sys.store, m)))
    .collect()
}

/// Ablation rows trained for several seeds, with their seed mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStudy {
    pub seeds: Vec<u64>,
    /// `runs[i]` holds the rows of `seeds[i]`.
    pub runs: Vec<Vec<AblationRow>>,
    pub mean: Vec<AblationRow>,
    /// Pretraining time per seed.
    #[serde(skip)]
    pub pretrain_seconds: Vec<f64>,
}

fn mean_wer(rows: &[&[SplitWer]]) -> Vec<SplitWer> {
    let n = rows.len() as f64;
    rows[0]
        .iter()
        .enumerate()
        .map(|(j, w)| SplitWer {
            split: w.split,
            asr: rows.iter().map(|r| r[j].asr).sum::<f64>() / n,
            corrected: rows.iter().map(|r| r[j].corrected).sum::<f64>() / n,
        })
        .collect()
}

impl AblationStudy {
    /// Runs [`ablation_matrix`] once per seed on the corpus `corpus_for(seed)`.
    pub fn run(
        seeds: &[u64],
        base: &TrainConfig,
        rows: &[Toggles],
        mut corpus_for: impl FnMut(u64) -> Result<Corpus>,
    ) -> Result<Self> {
        if seeds.is_empty() || rows.is_empty() {
            return Err(Error::Empty("ablation seeds or rows"));
        }
        let mut runs = Vec::with_capacity(seeds.len());
        let mut pretrain_seconds = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let corpus = corpus_for(seed)?;
            let cfg = TrainConfig {
                seed,
                ..base.clone()
            };
            log::info!("ablation seed {seed}");
            let (r, t) = ablation_matrix_timed(&corpus, &cfg, rows)?;
            runs.push(r);
            pretrain_seconds.push(t);
        }
        let mut study = Self::from_runs(seeds.to_vec(), runs);
        study.pretrain_seconds = pretrain_seconds;
        Ok(study)
    }

    pub fn from_runs(seeds: Vec<u64>, runs: Vec<Vec<AblationRow>>) -> Self {
        let mean = (0..runs[0].len())
            .map(|i| {
                let init: Vec<&[SplitWer]> =
                    runs.iter().map(|r| r[i].initial_wer.as_slice()).collect();
                let fin: Vec<&[SplitWer]> =
                    runs.iter().map(|r| r[i].final_wer.as_slice()).collect();
                AblationRow {
                    toggles: runs[0][i].toggles,
                    initial_wer: mean_wer(&init),
                    final_wer: mean_wer(&fin),
                    params: runs[0][i].params,
                    wall_seconds: runs.iter().map(|r| r[i].wall_seconds).sum(),
                }
            })
            .collect();
        Self {
            seeds,
            runs,
            mean,
            pretrain_seconds: Vec::new(),
        }
    }

    /// Pretraining plus the training time of the rows matching `keep`, summed over seeds.
    pub fn seconds_for(&self, keep: impl Fn(Toggles) -> bool) -> f64 {
        let rows: f64 = self
            .runs
            .iter()
            .flatten()
            .filter(|r| keep(r.toggles))
            .map(|r| r.wall_seconds)
            .sum();
        rows + self.pretrain_seconds.iter().sum::<f64>()
    }

    /// Seed-mean row with the given toggles.
    pub fn row(&self, t: Toggles) -> Option<&AblationRow> {
        self.mean.iter().find(|r| r.toggles == t)
    }

    /// Per-seed tables followed by the mean table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (seed, rows) in self.seeds.iter().zip(&self.runs) {
            let _ = writeln!(out, "seed {seed}");
            out.push_str(&ablation_table(rows));
            out.push('\n');
        }
        let _ = writeln!(out, "mean over {} seeds", self.seeds.len());
        out.push_str(&ablation_table(&self.mean));
        if let (Some(off), Some(on)) = (self.row(Toggles::ALL_OFF), self.row(Toggles::ALL_ON)) {
            let _ = writeln!(
                out,
                "\n{:<22} {:>12} {:>12} {:>12}",
                "system", "test_in", "test_out", "test_clean"
            );
            for (name, rows, corrected) in [
                ("asr 1-best (frozen)", off, false),
                ("corrected (all on)", on, true),
            ] {
                let _ = write!(out, "{name:<22}");
                for w in &rows.final_wer {
                    let v = if corrected { w.corrected } else { w.asr };
                    let _ = write!(out, " {:>11.2}%", 100.0 * v);
                }
                out.push('\n');
            }
        }
        out
    }
}
