use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use dger_core::autodiff::OpKind;
use dger_core::checkpoint;
use dger_core::diagnostics::{self, COMPONENTS};
use dger_core::eval::{CaseRecord, EvalReport};
use dger_core::hyp_text::{NBestList, NBestRecord};
use dger_core::speech_sim::{
    generate_corpus, read_corpus, write_corpus, Corpus, CorpusConfig, SplitName,
};
use dger_core::trainer::{
    evaluate, system_from_checkpoint, train_with, AblationStudy, RunOptions, TrainConfig,
    TrainOutcome, ABLATION_ROWS,
};

#[derive(Parser)]
#[command(
    name = "dger",
    version,
    about = "Noise-robust generative error correction on synthetic speech"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train, in-domain, out-of-domain and clean test splits).
    Gen(GenArgs),
    /// Pretrain and fine-tune, writing a checkpoint and reports.
    Train(TrainArgs),
    /// Word error rates of the acoustic 1-best and the corrected output on the test splits.
    Eval(EvalArgs),
    /// Train every component-toggle row for several seeds.
    Ablate(AblateArgs),
    /// Correct the utterances of one split, optionally from an n-best dump.
    Correct(CorrectArgs),
    /// Finite-difference gradient checks of every op and component.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Corpus setting override, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training setting override, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || !self.sets.is_empty()
    }

    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                TrainConfig::from_toml(&text)?
            }
            None => TrainConfig::default(),
        };
        for s in &self.sets {
            cfg.apply_override(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint. Without --config/--set its own settings are used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs in total; resume later with --resume.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Improved cases per split in cases.txt.
    #[arg(long, default_value_t = 10)]
    cases: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for eval.json, eval.txt and cases.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Utterances per split (0 = all).
    #[arg(long, default_value_t = 0)]
    limit: usize,
    #[arg(long, default_value_t = 10)]
    cases: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Shared corpus. Without it each seed gets a generated corpus of the same seed.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Corpus override for generated corpora, `key=value`. Repeatable.
    #[arg(long = "corpus-set", value_name = "KEY=VALUE")]
    corpus_sets: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test_in", value_parser = PossibleValuesParser::new(["train", "test_in", "test_out", "test_clean"]))]
    split: String,
    /// JSON-lines n-best dump used instead of decoding (one record per hypothesis).
    #[arg(long)]
    nbest: Option<PathBuf>,
    /// Write the decoded n-best lists as JSON lines.
    #[arg(long)]
    dump_nbest: Option<PathBuf>,
    /// Write one JSON case record per line.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to these components.
    #[arg(long, value_delimiter = ',', value_parser = PossibleValuesParser::new(COMPONENTS))]
    only: Vec<String>,
    /// Break the backward rule of one op kind (negative control).
    #[arg(long, value_name = "OP")]
    corrupt: Option<String>,
    /// Write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes to a temporary name first so an interrupted write never leaves a torn file.
fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    read_corpus(dir).with_context(|| format!("reading corpus from {}", dir.display()))
}

fn split_by_label(label: &str) -> Result<SplitName> {
    SplitName::ALL
        .into_iter()
        .find(|s| s.label() == label)
        .ok_or_else(|| anyhow!("unknown split {label}"))
}

fn gen(a: &GenArgs) -> Result<bool> {
    let mut cfg = CorpusConfig::default();
    for s in &a.sets {
        cfg.apply_override(s)?;
    }
    let corpus = generate_corpus(&cfg, a.seed)?;
    write_corpus(&corpus, &a.out)?;
    for s in &corpus.splits {
        println!(
            "{:<11} {:>5} utterances",
            s.name.label(),
            s.utterances.len()
        );
    }
    Ok(true)
}

fn write_eval(dir: &Path, eval: &EvalReport, cases: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    write(
        &dir.join("eval.json"),
        serde_json::to_string_pretty(eval)? + "\n",
    )?;
    write(&dir.join("eval.txt"), eval.table())?;
    write(&dir.join("cases.txt"), eval.case_dump(cases))?;
    Ok(())
}

fn train(a: &TrainArgs) -> Result<bool> {
    let corpus = load_corpus(&a.corpus)?;
    let resume = match &a.resume {
        Some(p) => Some(checkpoint::load(p)?),
        None => None,
    };
    let cfg = match (&resume, a.config.given()) {
        (Some(ck), false) => system_from_checkpoint(ck, &corpus.vocab)?.1.report.config,
        _ => a.config.build()?,
    };
    fs::create_dir_all(&a.out)?;
    write(&a.out.join("config.toml"), cfg.to_toml())?;
    let ckpt = a.out.join("checkpoint.bin");
    let mut save = |o: &TrainOutcome| -> dger_core::Result<()> {
        let bytes = o.checkpoint_bytes()?;
        write_atomic(&ckpt, &bytes)?;
        if let Some(e) = o.report.epochs.last() {
            eprintln!(
                "epoch {} ({}): loss {:.5}, checkpoint written",
                e.epoch, e.stage, e.loss.total
            );
        }
        Ok(())
    };
    let out = train_with(
        &corpus,
        &cfg,
        RunOptions {
            resume,
            on_epoch: Some(&mut save),
            stop_after: a.stop_after,
            ..RunOptions::default()
        },
    )?;
    write_atomic(&ckpt, &out.checkpoint_bytes()?)
        .with_context(|| format!("writing {}", ckpt.display()))?;
    let report = &out.report;
    write(&a.out.join("report.json"), report.to_json()?)?;
    write(&a.out.join("report.txt"), report.table())?;
    write(
        &a.out.join("timing.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "wall_seconds": report.wall_seconds }))?
            + "\n",
    )?;
    print!("{}", report.table());
    match &report.final_eval {
        Some(eval) => {
            write_eval(&a.out, eval, a.cases)?;
            print!("{}", eval.table());
        }
        None => println!(
            "stopped after {} epochs; resume with --resume {}",
            report.epochs.len(),
            ckpt.display()
        ),
    }
    Ok(true)
}

fn eval(a: &EvalArgs) -> Result<bool> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let (sys, meta) = system_from_checkpoint(&ck, &corpus.vocab)?;
    let report = evaluate(&sys, &corpus, &meta.report.config, a.limit)?;
    report.verify()?;
    print!("{}", report.table());
    if let Some(dir) = &a.out {
        write_eval(dir, &report, a.cases)?;
    }
    Ok(true)
}

fn ablate(a: &AblateArgs) -> Result<bool> {
    let base = a.config.build()?;
    let shared = match &a.corpus {
        Some(dir) => Some(load_corpus(dir)?),
        None => None,
    };
    let mut ccfg = CorpusConfig::default();
    for s in &a.corpus_sets {
        ccfg.apply_override(s)?;
    }
    let study = AblationStudy::run(&a.seeds, &base, &ABLATION_ROWS, |seed| match &shared {
        Some(c) => Ok(c.clone()),
        None => generate_corpus(&ccfg, seed),
    })?;
    fs::create_dir_all(&a.out)?;
    write(
        &a.out.join("ablation.json"),
        serde_json::to_string_pretty(&study)? + "\n",
    )?;
    let table = study.table();
    write(&a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(true)
}

fn read_nbest(path: &Path) -> Result<Vec<NBestRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn correct(a: &CorrectArgs) -> Result<bool> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let (sys, meta) = system_from_checkpoint(&ck, &corpus.vocab)?;
    let cfg = &meta.report.config;
    let split = split_by_label(&a.split)?;
    let given = match &a.nbest {
        Some(p) => Some(read_nbest(p)?),
        None => None,
    };
    let mut utts = corpus.split(split).utterances.as_slice();
    if a.limit > 0 {
        utts = &utts[..a.limit.min(utts.len())];
    }
    let (mut records, mut dumped) = (Vec::new(), Vec::new());
    let mut stdout = std::io::stdout().lock();
    for u in utts {
        let mut prep = sys.prepare(&u.noisy_frames, cfg.beam, cfg.toggles.naae_on)?;
        if let Some(all) = &given {
            let mine: Vec<NBestRecord> = all.iter().filter(|r| r.id == u.id).cloned().collect();
            if mine.is_empty() {
                bail!("n-best file has no hypotheses for {}", u.id);
            }
            prep.nbest = NBestList::from_records(&mine, &sys.tok);
        }
        dumped.extend(prep.nbest.records(&u.id, &sys.tok));
        let top1 = prep
            .nbest
            .texts(&sys.tok)
            .into_iter()
            .next()
            .unwrap_or_default();
        let out = sys.correct(&prep, cfg)?;
        let rec = CaseRecord::new(u.id.clone(), u.text(), top1, sys.tok.decode(&out.tokens))?;
        // a closed pipe (e.g. `| head`) must not abort the file outputs below
        let _ = writeln!(stdout, "{}\t{}\t{}", rec.id, rec.asr_1best, rec.corrected);
        records.push(rec);
    }
    let lines = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
    if let Some(p) = &a.out {
        let rows = records
            .iter()
            .map(serde_json::to_string)
            .collect::<serde_json::Result<Vec<_>>>()?;
        write(p, lines(rows))?;
    }
    if let Some(p) = &a.dump_nbest {
        let rows = dumped
            .iter()
            .map(serde_json::to_string)
            .collect::<serde_json::Result<Vec<_>>>()?;
        write(p, lines(rows))?;
    }
    Ok(true)
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let corrupt = match &a.corrupt {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            anyhow!("unknown op {name:?}; known ops: {}", names.join(", "))
        })?),
        None => None,
    };
    let only = (!a.only.is_empty()).then_some(a.only.as_slice());
    let results = diagnostics::run(only, corrupt)?;
    if let Some(k) = corrupt {
        println!("corrupted backward: {}", k.name());
    }
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if let Some(p) = &a.out {
        write(p, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    if failed == 0 {
        println!("all {} checks passed", results.len());
    } else {
        let what = corrupt.map_or(String::new(), |k| format!(" (corrupted op {})", k.name()));
        println!("{failed} of {} checks failed{what}", results.len());
    }
    Ok(failed == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Correct(a) => correct(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
