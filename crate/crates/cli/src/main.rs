use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use uautrack::config::RunConfig;
use uautrack::datamodel::{load_dataset, save_dataset, synth_dataset, AnnotationFormat, Modality, SequenceDataset, SynthDatasetParams};
use uautrack::eval::{evaluate_run, load_predictions, prediction_path, read_report, render_text, write_predictions, write_report};
use uautrack::fsutil::{write_atomic, write_json};
use uautrack::model::{ModelConfig, PromptMode, TrackerModel};
use uautrack::runtime::{track_sequence, FramePrediction, RuntimeConfig, Tracker};
use uautrack::train::{train, StepLog};
use uautrack::{Error, Result};

#[derive(Parser)]
#[command(name = "uautrack", version, about = "Unified RGB / TIR / RGB-T anti-UAV tracker")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, env = "UAUTRACK_CONFIG")]
    config: Option<PathBuf>,
    /// Seed; overrides the config file.
    #[arg(long, global = true, env = "UAUTRACK_SEED")]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true, env = "UAUTRACK_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "UAUTRACK_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train a toy-scale model.
    TrainToy(TrainArgs),
    /// Track every sequence of a dataset.
    Track(TrackArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Print a saved report as a table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 48)]
    length: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "RGBT")]
    modality: Modality,
    /// Inclusive frame range with the target hidden, e.g. `40:50`. Repeatable.
    #[arg(long, value_parser = parse_window)]
    occlude: Vec<(usize, usize)>,
    #[arg(long)]
    random_walk: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root; defaults to `dataset_root` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `native` or `anti-uav`.
    #[arg(long, default_value = "native")]
    format: AnnotationFormat,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Keep encoder layers at their initial values.
    #[arg(long)]
    freeze_encoder: bool,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// `text`, `zeroed` or `off`.
    #[arg(long)]
    prompt_mode: Option<PromptMode>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<sequence>.jsonl` prediction files.
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// A `report.json` written by `eval`.
    #[arg(long)]
    report: PathBuf,
}

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected START:END, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad start in {s:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad end in {s:?}"))?;
    if a > b {
        return Err(format!("window {s:?} ends before it starts"));
    }
    Ok((a, b))
}

struct Context {
    config: RunConfig,
    out: Option<PathBuf>,
    threads: usize,
}

impl Context {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
    }

    fn dataset(&self, args: &DataArgs) -> Result<SequenceDataset> {
        let root = args
            .data
            .as_deref()
            .or(self.config.dataset_root.as_deref())
            .ok_or_else(|| Error::Config("no dataset: pass --data or set dataset_root".into()))?;
        load_dataset(root, args.format)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = cli.out.clone().or_else(|| config.output_dir.clone());
    let ctx = Context { config, out, threads: rayon::current_num_threads() };
    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, &a),
        Command::TrainToy(a) => cmd_train(&ctx, &a),
        Command::Track(a) => cmd_track(&ctx, &a),
        Command::Eval(a) => cmd_eval(&ctx, &a),
        Command::Report(a) => cmd_report(&ctx, &a),
    }
}

fn cmd_synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    let out = ctx.out()?;
    if let Some(&(_, end)) = a.occlude.iter().find(|w| w.1 >= a.length) {
        return Err(Error::Parameter(format!("occlusion window ends at {end}, past the last frame")));
    }
    let params = SynthDatasetParams {
        seed: ctx.config.seed,
        count: a.count,
        length: a.length,
        img_size: a.size,
        modality: a.modality,
        occlusion_windows: a.occlude.clone(),
        random_walk: a.random_walk,
        ..SynthDatasetParams::default()
    };
    let ds = synth_dataset(&params)?;
    save_dataset(&ds, out)?;
    eprintln!("wrote {} sequences to {}", ds.sequences.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    model_hash: String,
    parameters: usize,
    steps: usize,
    first_total: Option<f64>,
    last_total: Option<f64>,
}

#[derive(Serialize)]
struct RunLog {
    command: &'static str,
    threads: usize,
    elapsed_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps_per_second: Option<f64>,
}

fn step_line(s: &StepLog) -> Result<String> {
    serde_json::to_string(s).map_err(|e| Error::Config(e.to_string()))
}

fn cmd_train(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let out = ctx.out()?;
    let mut config = ctx.config.clone();
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = a.steps_per_epoch {
        config.train.steps_per_epoch = s;
    }
    config.train.freeze_encoder |= a.freeze_encoder;
    config.validate()?;
    let ds = ctx.dataset(&a.data)?;
    let mut model = TrackerModel::init(config.model.clone(), config.seed)?;
    let total = config.train.total_steps();

    let start = Instant::now();
    let mut lines = String::new();
    let result = train(&mut model, &ds, &config.runtime, &config.train, config.seed, |s| {
        lines.push_str(&step_line(s)?);
        lines.push('\n');
        if s.step % 50 == 0 || s.step == total {
            eprintln!("step {}/{total}  loss {:.4}", s.step, s.total);
        }
        Ok(())
    });
    let elapsed = start.elapsed().as_secs_f64();
    write_atomic(&out.join("loss_log.jsonl"), lines.as_bytes())?;
    let log = result?;

    model.save(&out.join("model.bin"))?;
    write_atomic(&out.join("model.manifest"), model.manifest().as_bytes())?;
    config.save(&out.join("config.toml"))?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            model_hash: model.hash()?,
            parameters: model.params.scalar_count(),
            steps: log.len(),
            first_total: log.first().map(|s| s.total),
            last_total: log.last().map(|s| s.total),
        },
    )?;
    write_json(
        &out.join("run_log.json"),
        &RunLog {
            command: "train-toy",
            threads: ctx.threads,
            elapsed_seconds: elapsed,
            frames: None,
            fps: None,
            steps_per_second: (elapsed > 0.0).then(|| log.len() as f64 / elapsed),
        },
    )?;
    eprintln!("model written to {}", out.join("model.bin").display());
    Ok(())
}

#[derive(Serialize)]
struct SequenceSummary {
    id: String,
    modality: Modality,
    frames: usize,
    present_frames: usize,
}

#[derive(Serialize)]
struct TrackSummary<'a> {
    model_hash: String,
    model: &'a ModelConfig,
    runtime: &'a RuntimeConfig,
    sequences: Vec<SequenceSummary>,
    timing: &'static str,
}

fn cmd_track(ctx: &Context, a: &TrackArgs) -> Result<()> {
    let out = ctx.out()?;
    let model = TrackerModel::load(&a.model)?;
    let mut runtime = ctx.config.runtime;
    if let Some(mode) = a.prompt_mode {
        runtime.prompt_mode = mode;
    }
    let ds = ctx.dataset(&a.data)?;
    for seq in &ds.sequences {
        Tracker::new(&model, runtime, seq.modality)?;
    }
    let start = Instant::now();
    let results: Vec<Vec<FramePrediction>> = ds
        .sequences
        .par_iter()
        .map(|seq| track_sequence(seq, &model, &runtime))
        .collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let frames: usize = results.iter().map(Vec::len).sum();

    let mut sequences = Vec::new();
    for (seq, preds) in ds.sequences.iter().zip(&results) {
        write_predictions(&prediction_path(out, &seq.id), preds)?;
        sequences.push(SequenceSummary {
            id: seq.id.clone(),
            modality: seq.modality,
            frames: preds.len(),
            present_frames: preds.iter().filter(|p| p.present).count(),
        });
    }
    write_json(
        &out.join("summary.json"),
        &TrackSummary {
            model_hash: model.hash()?,
            model: &model.config,
            runtime: &runtime,
            sequences,
            timing: "run_log.json",
        },
    )?;
    write_json(
        &out.join("run_log.json"),
        &RunLog {
            command: "track",
            threads: ctx.threads,
            elapsed_seconds: elapsed,
            frames: Some(frames),
            fps: Some(frames as f64 / elapsed.max(1e-9)),
            steps_per_second: None,
        },
    )?;
    eprintln!("tracked {} sequences ({frames} frames, {:.1} fps)", ds.sequences.len(), frames as f64 / elapsed.max(1e-9));
    Ok(())
}

fn cmd_eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let out = ctx.out()?;
    let ds = ctx.dataset(&a.data)?;
    let preds: BTreeMap<String, Vec<FramePrediction>> = load_predictions(&a.predictions, &ds)?;
    let report = evaluate_run(&preds, &ds)?;
    write_report(out, &report)?;
    print!("{}", render_text(&report));
    Ok(())
}

fn cmd_report(ctx: &Context, a: &ReportArgs) -> Result<()> {
    let report = read_report(&a.report)?;
    if let Some(out) = &ctx.out {
        write_report(out, &report)?;
    }
    print!("{}", render_text(&report));
    Ok(())
}
