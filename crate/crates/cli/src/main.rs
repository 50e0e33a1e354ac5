use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use exprcl::config::{parse_config, RunConfig};
use exprcl::data::ManifestFormat;
use exprcl::downstream::{DownstreamMode, DownstreamTask};
use exprcl::experiment::{
    eval_fr_run, load_data, load_encoder, pretrain_run, probe_run, run_matrix, verify_run, PretrainOptions, RunDir,
};
use exprcl::synth::{generate_corpus, save_labels, CorpusSpec, SYNTH_SCHEME};
use exprcl::{EvalReport, Error};

#[derive(Parser)]
#[command(name = "exprcl", version, about = "Expression-aware contrastive pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic face corpus (manifest plus label sidecar).
    GenSynthetic(GenArgs),
    /// Contrastive pretraining into a run directory.
    Pretrain(PretrainArgs),
    /// Linear probe on frozen backbone features.
    Probe(EvalArgs),
    /// Fine-tune the backbone together with a task head.
    Finetune(EvalArgs),
    /// Face verification and k-NN identification on backbone features.
    EvalFr(FrArgs),
    /// Run every row of a strategy matrix.
    Matrix(MatrixArgs),
    /// Check that every artifact in a run directory matches its config.
    VerifyRun(VerifyArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Take corpus parameters from `[data.synthetic]` of this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Render PNG files instead of referencing the sidecar.
    #[arg(long)]
    png: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(clap::Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Record every view's augmentation ops in traces/augs.jsonl.
    #[arg(long)]
    trace_augmentations: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Pretraining run directory; its resolved config is used unless
    /// `--config` is given.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to the run's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Label file (sidecar JSONL or CSV) overriding `data.labels`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<Task>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    ExprCls,
    VaReg,
}

#[derive(clap::Args)]
struct FrArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MatrixArgs {
    /// Matrix file: `base` config path plus `[[row]]` tables.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| {
        c.downcast_ref::<Error>().is_some_and(Error::is_validation) || c.downcast_ref::<UsageError>().is_some()
    });
    if validation {
        1
    } else {
        2
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => evaluate(a, DownstreamMode::Freeze),
        Command::Finetune(a) => evaluate(a, DownstreamMode::Finetune),
        Command::EvalFr(a) => eval_fr(a),
        Command::Matrix(a) => {
            if !a.spec.is_file() {
                return Err(usage(format!("matrix file {} does not exist", a.spec.display())));
            }
            let rows = run_matrix(&a.spec, &a.out)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} rows, {failed} failed; results in {}", rows.len(), a.out.display());
            if failed > 0 {
                return Err(anyhow!("{failed} matrix rows failed"));
            }
            Ok(())
        }
        Command::VerifyRun(a) => {
            if !a.run.is_dir() {
                return Err(usage(format!("run directory {} does not exist", a.run.display())));
            }
            let out = verify_run(&a.run)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
            if !out.ok() {
                return Err(usage(format!("{} artifact mismatches", out.mismatches.len())));
            }
            Ok(())
        }
    }
}

fn gen_synthetic(a: GenArgs) -> anyhow::Result<()> {
    let mut spec = match &a.config {
        Some(p) => read_config(p)?.data.synthetic,
        None => CorpusSpec::default(),
    };
    if let Some(v) = a.identities {
        spec.n_identities = v;
    }
    if let Some(v) = a.videos {
        spec.videos_per_id = v;
    }
    if let Some(v) = a.duration {
        spec.duration_s = v;
    }
    if let Some(v) = a.fps {
        spec.fps = v;
    }
    if let Some(v) = a.drift {
        spec.drift = v;
    }
    if let Some(v) = a.size {
        spec.size = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let corpus = generate_corpus(&spec)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = corpus.manifest;
    if a.png {
        let dir = a.out.join("images");
        std::fs::create_dir_all(&dir)?;
        let mut records = manifest.records().to_vec();
        for rec in &mut records {
            let key = rec.image_ref.strip_prefix(SYNTH_SCHEME).unwrap_or(&rec.image_ref).to_string();
            let (img, _) = corpus.labels[&key].render()?;
            let name = format!("images/{}.png", key.replace('@', "_"));
            img.save_png(&a.out.join(&name))?;
            rec.image_ref = name;
        }
        manifest = exprcl::DatasetManifest::from_records(records)?;
    }
    let (fmt, name) = match a.format {
        Format::Csv => (ManifestFormat::Csv, "manifest.csv"),
        Format::Jsonl => (ManifestFormat::Jsonl, "manifest.jsonl"),
    };
    manifest.save(&a.out.join(name), fmt)?;
    save_labels(&corpus.labels, &a.out.join("labels.jsonl"))?;
    println!(
        "{} frames, {} videos, {} identities -> {}",
        manifest.len(),
        manifest.videos().len(),
        manifest.num_identities(),
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let cfg = read_config(&a.config)?;
    let echo = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let data = load_data(&cfg, None)?;
    let dir = RunDir::create(&a.out, &cfg, &echo)?;
    let summary = pretrain_run(
        &cfg,
        &data,
        &dir,
        PretrainOptions {
            trace_augmentations: a.trace_augmentations,
        },
    )?;
    let last = summary.history.last();
    println!(
        "pretrained {} epochs; final loss {:.4}, top1 {:.3}; checkpoint {}",
        summary.info.epochs_completed,
        last.map_or(f64::NAN, |s| s.loss),
        last.map_or(f64::NAN, |s| s.top1),
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn read_config(p: &Path) -> anyhow::Result<RunConfig> {
    if !p.is_file() {
        return Err(usage(format!("config {} does not exist", p.display())));
    }
    Ok(parse_config(p)?)
}

fn run_config(run: &Path, config: Option<&Path>) -> anyhow::Result<RunConfig> {
    if config.is_none() && !run.is_dir() {
        return Err(usage(format!("run directory {} does not exist", run.display())));
    }
    Ok(match config {
        Some(p) => read_config(p)?,
        None => RunDir::open(run).config()?,
    })
}

fn checkpoint(run: &Path, given: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let p = given.unwrap_or_else(|| RunDir::open(run).final_checkpoint());
    if !p.exists() {
        return Err(usage(format!("checkpoint {} does not exist", p.display())));
    }
    Ok(p)
}

fn print_report(name: &str, path: &Path, r: &EvalReport) {
    let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!("{name}: {} ({})", metrics.join(" "), path.display());
}

fn evaluate(a: EvalArgs, mode: DownstreamMode) -> anyhow::Result<()> {
    let mut cfg = run_config(&a.run, a.config.as_deref())?;
    if let Some(t) = a.task {
        cfg.downstream.task = match t {
            Task::ExprCls => DownstreamTask::ExprCls,
            Task::VaReg => DownstreamTask::VaReg,
        };
    }
    let ckpt = checkpoint(&a.run, a.checkpoint)?;
    let data = load_data(&cfg, a.labels.as_deref())?;
    let encoder = load_encoder(&ckpt)?;
    let report = probe_run(&cfg, &data, encoder, Some(mode))?;
    let name = format!(
        "{}_{}",
        match mode {
            DownstreamMode::Freeze => "probe",
            DownstreamMode::Finetune => "finetune",
        },
        match cfg.downstream.task {
            DownstreamTask::ExprCls => "expr_cls",
            DownstreamTask::VaReg => "va_reg",
        }
    );
    let path = RunDir::open(&a.run).write_report_for(&name, &report, &cfg)?;
    print_report(&name, &path, &report);
    Ok(())
}

fn eval_fr(a: FrArgs) -> anyhow::Result<()> {
    let cfg = run_config(&a.run, a.config.as_deref())?;
    let ckpt = checkpoint(&a.run, a.checkpoint)?;
    let data = load_data(&cfg, None)?;
    let encoder = load_encoder(&ckpt)?;
    let report = eval_fr_run(&cfg, &data, &encoder)?;
    let path = RunDir::open(&a.run).write_report_for("fr_knn", &report, &cfg)?;
    print_report("fr_knn", &path, &report);
    Ok(())
}
