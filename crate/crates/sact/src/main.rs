use std::cell::RefCell;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sact::dataset::{self, Dataset};
use sact::{checkpoint, dataset::read_json};
use sact_core::composer::Variant;
use sact_core::data::{generate_synthetic, AnnotatedClip, Split, SyntheticTaskSpec};
use sact_core::harness::{
    attention_entropy, describe, evaluate, gate_report, gradcheck_pipeline, train, Checkpoint, DenseCaptioner,
    MetricsReport, TrainConfig,
};
use sact_core::model::ClipAnalysis;
use serde_json::json;

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "sact", version, about = "Awareness-gated dense captioning", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic planted-event dataset.
    GenerateData(GenerateDataArgs),
    /// Train on the train split, checkpointing every epoch.
    Train(TrainArgs),
    /// Proposals as JSON lines on stdout, metrics to a report file.
    Eval(EvalArgs),
    /// Captions for kept proposals as JSON lines.
    Generate(ClipArgs),
    /// Whole-pipeline gradient check against finite differences.
    Gradcheck(GradcheckArgs),
    /// Per-frame gate selection and attention entropy as JSON lines.
    AnalyzeGates(ClipArgs),
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

#[derive(Args)]
struct GenerateDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator settings as JSON; missing fields take defaults.
    #[arg(long, value_parser = existing_file)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Training config as JSON; missing fields take defaults.
    #[arg(long, value_parser = existing_file)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    gate_penalty: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct ClipArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    clips: ClipArgs,
    /// Defaults to `<checkpoint>/eval-<split>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "separated")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}, expected train, val or test")),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn generate_data(a: GenerateDataArgs) -> Result<()> {
    let mut spec: SyntheticTaskSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticTaskSpec::default(),
    };
    spec.num_clips = a.num_clips.unwrap_or(spec.num_clips);
    spec.frames = a.frames.unwrap_or(spec.frames);
    spec.noise = a.noise.unwrap_or(spec.noise);
    spec.seed = a.seed.unwrap_or(spec.seed);
    let data = generate_synthetic(&spec)?;
    let manifest = dataset::save_synthetic(&a.out, &data)?;
    eprintln!(
        "wrote {} clips to {} ({} train, {} val, {} test)",
        data.clips.len(),
        a.out.display(),
        manifest.ids(Split::Train).len(),
        manifest.ids(Split::Val).len(),
        manifest.ids(Split::Test).len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    config.seed = a.seed.unwrap_or(config.seed);
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.variant = a.variant.unwrap_or(config.variant);
    config.learning_rate = a.learning_rate.unwrap_or(config.learning_rate);
    config.gate_penalty = a.gate_penalty.unwrap_or(config.gate_penalty);
    config.threshold = a.threshold.unwrap_or(config.threshold);
    config.validate()?;

    let data = dataset::load_dataset(&a.data)?;
    let train_clips = data.split(Split::Train);
    let out = a.out.clone();
    let (ckpt, curve) = train(&config, &train_clips, |losses, snapshot| {
        eprintln!(
            "epoch {:>3}  total {:.4}  caption {:.4}  proposal {:.4}  gate {:.4}",
            losses.epoch, losses.total, losses.caption, losses.proposal, losses.gate
        );
        checkpoint::save(&out, snapshot).map_err(|e| sact_core::Error::Hook(e.to_string()))
    })?;
    checkpoint::save(&out, &ckpt)?;

    let val = data.split(Split::Val);
    let mut report = evaluate(&ckpt, if val.is_empty() { &train_clips } else { &val })?;
    report.loss_curve = curve;
    dataset::write_json(&out.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    clips: Vec<AnnotatedClip>,
}

fn load_for(a: &ClipArgs) -> Result<Loaded> {
    let ckpt = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data: Dataset = dataset::load_dataset(&a.data)?;
    let clips = data.split(a.split);
    if clips.is_empty() {
        bail!("split {} of {} is empty", split_name(a.split), a.data.display());
    }
    for c in &clips {
        ckpt.check_clip(&c.features)?;
    }
    Ok(Loaded { ckpt, clips })
}

/// Keeps each analysis so proposals can be printed without a second pass.
struct Recording<'a> {
    inner: &'a Checkpoint,
    seen: RefCell<Vec<ClipAnalysis>>,
}

impl DenseCaptioner for Recording<'_> {
    fn analyze(&self, clip: &AnnotatedClip) -> sact_core::Result<ClipAnalysis> {
        let a = self.inner.analyze(clip)?;
        self.seen.borrow_mut().push(a.clone());
        Ok(a)
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let Loaded { ckpt, clips } = load_for(&a.clips)?;
    let rec = Recording { inner: &ckpt, seen: RefCell::new(Vec::new()) };
    let report: MetricsReport = evaluate(&rec, &clips)?;
    let mut out = BufWriter::new(io::stdout().lock());
    for analysis in rec.seen.into_inner() {
        for p in analysis.proposals {
            let line = json!({"clip_id": analysis.clip_id, "score": p.score, "start": p.start, "end": p.end});
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    let path = a
        .report
        .unwrap_or_else(|| a.clips.checkpoint.join(format!("eval-{}.json", split_name(a.clips.split))));
    dataset::write_json(&path, &report)?;
    eprintln!(
        "BLEU_4 {:.4}  recall {:.4}  token accuracy {:.4}  report {}",
        report.bleu_4,
        report.recall,
        report.token_accuracy,
        path.display()
    );
    Ok(())
}

fn generate_cmd(a: ClipArgs) -> Result<()> {
    let Loaded { ckpt, clips } = load_for(&a)?;
    let mut out = BufWriter::new(io::stdout().lock());
    for c in &clips {
        for (seg, caption) in describe(&ckpt, &c.features)? {
            let line = json!({"clip_id": c.clip_id(), "segment": [seg.start, seg.end], "caption": caption});
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn analyze_gates(a: ClipArgs) -> Result<()> {
    let Loaded { ckpt, clips } = load_for(&a)?;
    let mut out = BufWriter::new(io::stdout().lock());
    for c in &clips {
        let gates: Vec<Vec<serde_json::Value>> = gate_report(&ckpt, &c.features)?
            .iter()
            .map(|g| {
                g.beta
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| json!({"frame_index": i, "beta": b, "kept": b > 0.0}))
                    .collect()
            })
            .collect();
        let entropy = attention_entropy(&ckpt, &c.features)?;
        let line = json!({"clip_id": c.clip_id(), "gates": gates, "attention_entropy": entropy});
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool> {
    let start = std::time::Instant::now();
    let r = gradcheck_pipeline(a.variant, a.seed)?;
    let ok = r.max_rel_error < GRADCHECK_TOL;
    let line = json!({
        "variant": a.variant.to_string(),
        "max_rel_error": r.max_rel_error,
        "worst_param": r.worst_param,
        "worst_index": r.worst_index,
        "checked": r.checked,
        "tolerance": GRADCHECK_TOL,
        "pass": ok,
        "seconds": start.elapsed().as_secs_f64(),
    });
    println!("{line}");
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData(a) => generate_data(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Generate(a) => generate_cmd(a)?,
        Command::AnalyzeGates(a) => analyze_gates(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

