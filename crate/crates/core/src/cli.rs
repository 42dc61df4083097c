//! Command-line interface. [`run`] returns the process exit code: 0 on
//! success, 1 on usage errors, 2 when validation, training or I/O fails.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::augment::{augment_batch, AugmentKind, AugmentMode};
use crate::codec_lm::PromptSpec;
use crate::config::Config;
use crate::io::{self, data_synth, read_jsonl, write_jsonl, Checkpoint};
use crate::numerics::gradcheck;
use crate::pipeline::{
    evaluate_losses, evaluate_token_accuracy, fit_codebook, prepare, FusionSource, ModelBundle,
    ModelKind, Trainer,
};
use crate::predictor::PhonemeSequence;
use crate::vc::{generate_synthetic_corpus, speaker_embeddings, SyntheticPlan};

#[derive(Parser, Debug)]
#[command(
    name = "hamtts",
    version,
    about = "Desk-scale codec language model TTS toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML configuration file; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded toy corpus as JSON lines.
    DataSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the refinement codebook on a corpus and write it as JSON.
    KmeansFit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the AR or NAR model and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take weights (and the codebook) from a checkpoint and keep the
        /// shared front end frozen.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue a run, restoring optimizer and RNG state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Step log destination (JSON lines); standard output when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Synthesize a codec grid for a phoneme string.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated phoneme ids.
        #[arg(long)]
        phonemes: String,
        /// Corpus holding the enrollment utterance.
        #[arg(long)]
        prompt_data: PathBuf,
        #[arg(long)]
        prompt_id: String,
        #[arg(long, default_value_t = 3)]
        prompt_frames: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Show how augmentation perturbs the first quantizer of each sample.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Either)]
        mode: ModeArg,
    },
    /// Convert a corpus to synthetic speakers.
    VcRun {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        speakers: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PlanArg::Cross)]
        plan: PlanArg,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Token accuracy and losses of a checkpoint on a corpus.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SourceArg::Predictor)]
        source: SourceArg,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct TrainOverrides {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    augment_p: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModelArg {
    Ar,
    Nar,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Either,
    Replace,
    Duplicate,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PlanArg {
    Cross,
    Desk,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SourceArg {
    Predictor,
    Aligner,
}

/// Parses `argv` (program name first) and executes the subcommand.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            2
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    cfg.train.seed = io::seed_override(cfg.train.seed)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut Config, o: &TrainOverrides) {
    let t = &mut cfg.train;
    if let Some(v) = o.steps {
        t.steps = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.lr {
        t.base_lr = v;
    }
    if let Some(v) = o.warmup_steps {
        t.warmup_steps = v;
    }
    if let Some(v) = o.total_steps {
        t.total_steps = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.augment_p {
        t.augment_p = v;
    }
}

fn read_dataset(path: &Path) -> anyhow::Result<Vec<io::DatasetRecord>> {
    read_jsonl(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn execute(command: Command, out: &mut dyn Write) -> anyhow::Result<()> {
    match command {
        Command::DataSynth {
            common,
            samples,
            speakers,
            seed,
            out: path,
        } => {
            let cfg = load_config(&common)?;
            let records = data_synth(
                samples,
                speakers,
                seed.unwrap_or(cfg.train.seed),
                &cfg.model,
            )?;
            write_jsonl(&path, &records)?;
            writeln!(out, "wrote {} records to {}", records.len(), path.display())?;
        }
        Command::KmeansFit {
            common,
            data,
            k,
            seed,
            out: path,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = k {
                cfg.model.kmeans_k = k;
            }
            let records = read_dataset(&data)?;
            for r in &records {
                r.validate(&cfg.model)?;
            }
            let book = fit_codebook(&records, &cfg.model, seed.unwrap_or(cfg.train.seed))?;
            std::fs::write(&path, serde_json::to_vec_pretty(&book)?)?;
            writeln!(
                out,
                "k={} sse={:.6} -> {}",
                book.k,
                book.inertia,
                path.display()
            )?;
        }
        Command::Train {
            common,
            model,
            data,
            out: path,
            init,
            resume,
            log,
            overrides,
        } => {
            let mut cfg = load_config(&common)?;
            apply_overrides(&mut cfg, &overrides);
            let kind = match model {
                ModelArg::Ar => ModelKind::Ar,
                ModelArg::Nar => ModelKind::Nar,
            };
            let records = read_dataset(&data)?;
            let from = init
                .as_ref()
                .or(resume.as_ref())
                .map(|p| Checkpoint::load(p))
                .transpose()?;
            let bundle = match &from {
                Some(ck) => {
                    cfg.model = ck.config.model.clone();
                    ModelBundle::from_checkpoint(ck)?
                }
                None => ModelBundle::new(&cfg.model)?,
            };
            cfg.validate()?;
            let mut trainer = Trainer::new(bundle, &records, cfg.train.clone(), kind)?;
            if init.is_some() {
                trainer.freeze_frontend();
            }
            if let (Some(ck), Some(_)) = (&from, &resume) {
                trainer.resume_from(ck)?;
            }
            let mut sink: Box<dyn Write + '_> = match &log {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(&mut *out),
            };
            let remaining = cfg.train.steps.saturating_sub(trainer.step);
            let mut write_err = None;
            trainer.run(remaining, |l| {
                if let Err(e) = serde_json::to_writer(&mut sink, l)
                    .map_err(std::io::Error::from)
                    .and_then(|_| sink.write_all(b"\n"))
                {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            sink.flush()?;
            drop(sink);
            trainer.checkpoint(&cfg).save(&path)?;
            writeln!(
                out,
                "saved checkpoint after step {} to {}",
                trainer.step,
                path.display()
            )?;
        }
        Command::Infer {
            common: _,
            checkpoint,
            phonemes,
            prompt_data,
            prompt_id,
            prompt_frames,
            max_len,
            temperature,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let bundle = ModelBundle::from_checkpoint(&ck)?;
            let inventory = bundle.config.phoneme_inventory;
            let ids = phonemes
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .with_context(|| format!("phoneme id {s:?}"))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let text = PhonemeSequence::new(ids, inventory)?;
            let records = read_dataset(&prompt_data)?;
            let Some(rec) = records.iter().find(|r| r.id == prompt_id) else {
                bail!("no record `{prompt_id}` in {}", prompt_data.display());
            };
            rec.validate(&bundle.config)?;
            let codecs = rec.codec_sequence()?;
            let p = prompt_frames.clamp(1, codecs.len());
            let prompt = PromptSpec {
                prompt_codecs: codecs.frames(0, p)?,
                prompt_fused: Some(bundle.fuse_from_text(&rec.phoneme_sequence(inventory)?)?),
            };
            let grid = bundle.synthesize(&text, &prompt, max_len, temperature, seed)?;
            writeln!(out, "{}", serde_json::to_string(&grid)?)?;
        }
        Command::AugmentPreview {
            common,
            data,
            p,
            seed,
            mode,
        } => {
            let cfg = load_config(&common)?;
            let records = read_dataset(&data)?;
            let codecs = records
                .iter()
                .map(|r| {
                    r.validate(&cfg.model)?;
                    r.codec_sequence()
                })
                .collect::<crate::Result<Vec<_>>>()?;
            let mode = match mode {
                ModeArg::Either => AugmentMode::Either,
                ModeArg::Replace => AugmentMode::Replace,
                ModeArg::Duplicate => AugmentMode::Duplicate,
            };
            let aug = augment_batch(&codecs, &codecs, p, seed, mode)?;
            for (r, a) in records.iter().zip(&aug) {
                let kind = match a.kind {
                    AugmentKind::None => "none",
                    AugmentKind::Replace => "replace",
                    AugmentKind::Duplicate => "duplicate",
                };
                writeln!(out, "{} {kind} segment={:?}", r.id, a.segment)?;
                writeln!(out, "  before: {}", render(a.target_codecs.level(1), None))?;
                let window = (a.kind != AugmentKind::None).then_some(a.segment);
                writeln!(out, "  after:  {}", render(a.input_codecs.level(1), window))?;
            }
        }
        Command::VcRun {
            common,
            data,
            speakers,
            out: path,
            seed,
            plan,
        } => {
            let cfg = load_config(&common)?;
            let records = read_dataset(&data)?;
            for r in &records {
                r.validate(&cfg.model)?;
            }
            let spk = speaker_embeddings(speakers, cfg.model.vc.speaker_dim, seed);
            let base = records.iter().map(|r| r.speaker_id + 1).max().unwrap_or(0);
            let plan = match plan {
                PlanArg::Cross => SyntheticPlan::CrossProduct,
                PlanArg::Desk => SyntheticPlan::DESK,
            };
            let synthetic = generate_synthetic_corpus(&records, &spk, base, plan, &cfg.model)?;
            write_jsonl(&path, &synthetic)?;
            writeln!(
                out,
                "wrote {} synthetic records to {}",
                synthetic.len(),
                path.display()
            )?;
        }
        Command::Gradcheck { common: _, seed } => {
            let reports = gradcheck::run_suite(seed)?;
            let mut failed = 0;
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                writeln!(
                    out,
                    "{verdict:4} {:18} {:?} max_rel_error={:.3e}",
                    r.op, r.shapes, r.max_rel_error
                )?;
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!(
                    "{failed} of {} gradient checks exceed tolerance {:e}",
                    reports.len(),
                    gradcheck::TOLERANCE
                );
            }
            writeln!(out, "all {} gradient checks passed", reports.len())?;
        }
        Command::Evaluate {
            common: _,
            checkpoint,
            data,
            source,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut bundle = ModelBundle::from_checkpoint(&ck)?;
            let records = read_dataset(&data)?;
            if bundle.codebook.is_none() {
                bundle.codebook = Some(fit_codebook(
                    &records,
                    &bundle.config,
                    ck.config.train.seed,
                )?);
            }
            let samples = prepare(
                &records,
                &bundle.config,
                bundle.codebook.as_ref().expect("set above"),
            )?;
            let source = match source {
                SourceArg::Predictor => FusionSource::Predictor,
                SourceArg::Aligner => FusionSource::Aligner,
            };
            let prompt_frames = ck.config.train.prompt_frames;
            let acc = evaluate_token_accuracy(&bundle, &samples, prompt_frames, source)?;
            let ar = evaluate_losses(&bundle, &samples, ModelKind::Ar, prompt_frames)?;
            let nar = evaluate_losses(&bundle, &samples, ModelKind::Nar, prompt_frames)?;
            let report = serde_json::json!({ "accuracy": acc, "ar_loss": ar, "nar_loss": nar });
            writeln!(out, "{report}")?;
        }
    }
    Ok(())
}

/// Space-separated tokens with the perturbed window bracketed.
fn render(tokens: &[usize], window: Option<(usize, usize)>) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if let Some((start, len)) = window {
            if i == start {
                s.push('[');
            }
            s.push_str(&t.to_string());
            if i + 1 == start + len {
                s.push(']');
            }
        } else {
            s.push_str(&t.to_string());
        }
        s.push(' ');
    }
    s.trim_end().to_string()
}
