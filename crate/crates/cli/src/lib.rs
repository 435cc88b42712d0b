//! Subcommands behind the `nnclr` binary: pretrain, eval, ablate, gradcheck.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use nnclr::checkpoint::{load_checkpoint, load_header, save_checkpoint};
use nnclr::config::{ConfigDoc, Precision, RunConfig};
use nnclr::eval::{linear_probe, ProbeResult};
use nnclr::gradcheck::run_gradcheck;
use nnclr::train::{NnKind, Trainer};
use nnclr::{Error, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    /// 2 for configuration problems, 4 for unreadable checkpoints, 3 for
    /// anything that goes wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Config { .. }) => 2,
            CliError::Core(
                Error::BadMagic
                | Error::VersionMismatch { .. }
                | Error::CorruptCheckpoint(_)
                | Error::CheckpointMissing(_),
            ) => 4,
            CliError::GradcheckFailed(_) => 1,
            _ => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "nnclr",
    version,
    about = "Nearest-neighbor contrastive pretraining"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain an encoder and write a self-describing run directory.
    Pretrain(PretrainArgs),
    /// Linear probe on a checkpoint's frozen features.
    Eval(EvalArgs),
    /// One pretrain + probe per value of a config axis, as CSV.
    Ablate(AblateArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value`, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory; defaults to `runs/<objective>-seed<seed>-<config hash>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `config`, `blobs[:key=value,...]` or `cifar10:<dir>`.
    #[arg(long, default_value = "config")]
    pub data: String,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    /// Directory receiving `eval.jsonl`; defaults to the checkpoint's run
    /// directory.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    QueueSize,
    TopK,
    BatchSize,
    EmbedDim,
    NnKind,
    PredHead,
    AugmentMode,
    Replacement,
}

impl Axis {
    pub fn key(self) -> &'static str {
        match self {
            Axis::QueueSize => "queue_size",
            Axis::TopK => "top_k",
            Axis::BatchSize => "batch_size",
            Axis::EmbedDim => "encoder.embed_dim",
            Axis::NnKind => "nn_kind",
            Axis::PredHead => "use_prediction_head",
            Axis::AugmentMode => "augment.mode",
            Axis::Replacement => "replacement",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// One row per value and seed; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain(a) => {
            let summary = pretrain(&a)?;
            println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
            Ok(())
        }
        Command::Eval(a) => {
            let record = eval(&a)?;
            println!("{}", serde_json::to_string(&record).map_err(Error::from)?);
            Ok(())
        }
        Command::Ablate(a) => {
            let rows = ablate(&a)?;
            match &a.out {
                Some(path) => {
                    let file = File::create(path).map_err(io_err(path))?;
                    write_csv(file, &rows)
                }
                None => write_csv(std::io::stdout().lock(), &rows),
            }
        }
        Command::Gradcheck(a) => gradcheck(&a, &mut std::io::stdout().lock()),
    }
}

/// Reads a config file and applies the seed and `--set` overrides in order.
pub fn load_config(path: &Path, seed: Option<u64>, overrides: &[String]) -> CliResult<ConfigDoc> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
    let mut doc = ConfigDoc::parse(&text)?;
    for kv in overrides {
        doc.apply_override(kv)?;
    }
    if let Some(seed) = seed {
        doc.set("seed", &seed.to_string())?;
    }
    Ok(doc)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Artifacts {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

/// `manifest.json` of a run directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config: String,
    pub config_sha256: String,
    pub overrides: Vec<String>,
    pub git_describe: Option<String>,
    pub seed: u64,
    pub precision: &'static str,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub artifacts: Artifacts,
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainSummary {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub final_nn_match: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn pretrain(args: &PretrainArgs) -> CliResult<PretrainSummary> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let doc = load_config(&args.config, args.seed, &args.overrides)?;
    let cfg = doc.build()?;
    let text = doc.to_text();
    let hash = sha256_hex(text.as_bytes());
    let run_dir = args.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{}-seed{}-{}",
            cfg.train.objective.as_str(),
            cfg.train.seed,
            &hash[..12]
        ))
    });
    fs::create_dir_all(run_dir.join("checkpoints")).map_err(io_err(&run_dir))?;
    let config_path = run_dir.join("config.txt");
    fs::write(&config_path, &text).map_err(io_err(&config_path))?;
    let mut manifest = RunManifest {
        config: text.clone(),
        config_sha256: hash,
        overrides,
        git_describe: git_describe(),
        seed: cfg.train.seed,
        precision: cfg.precision.as_str(),
        started_at: now(),
        finished_at: None,
        status: "running".into(),
        artifacts: Artifacts {
            config: config_path,
            metrics: run_dir.join("metrics.jsonl"),
            ..Default::default()
        },
    };
    let manifest_path = run_dir.join("manifest.json");
    let save_manifest = |m: &RunManifest| {
        write_atomic(
            &manifest_path,
            &serde_json::to_vec_pretty(m).map_err(Error::from)?,
        )
    };
    save_manifest(&manifest)?;

    let result = match cfg.precision {
        Precision::F32 => train_run::<f32>(&cfg, &text, &run_dir, &mut manifest.artifacts),
        Precision::F64 => train_run::<f64>(&cfg, &text, &run_dir, &mut manifest.artifacts),
    };
    manifest.finished_at = Some(now());
    manifest.status = match &result {
        Ok(_) => "completed".into(),
        Err(e) => format!("failed: {e}"),
    };
    save_manifest(&manifest)?;
    let (steps, last) = result?;
    Ok(PretrainSummary {
        run_dir,
        steps,
        final_loss: last.as_ref().map(|m| m.loss),
        final_nn_match: last.and_then(|m| m.nn_match),
        checkpoint: manifest.artifacts.final_checkpoint.unwrap_or_default(),
    })
}

fn train_run<T: Scalar>(
    cfg: &RunConfig,
    text: &str,
    run_dir: &Path,
    artifacts: &mut Artifacts,
) -> CliResult<(u64, Option<nnclr::train::StepMetrics>)> {
    let (train, _) = cfg.data.load::<T>()?;
    let with_labels = cfg.diagnostic_labels || cfg.train.nn_kind == NnKind::Oracle;
    let labels = with_labels.then_some(train.labels.as_slice());
    let mut trainer = Trainer::for_dataset(cfg.train.clone(), &train, with_labels)?;

    let metrics_path = &artifacts.metrics;
    let mut metrics = BufWriter::new(File::create(metrics_path).map_err(io_err(metrics_path))?);
    let ckpt_dir = run_dir.join("checkpoints");
    let every = cfg.train.eval_every;
    let mut last = None;
    let mut periodic = Vec::new();
    let mut outcome = Ok(());
    for _ in 0..cfg.train.epochs {
        outcome = trainer.run_epoch(&train, labels, &mut |t, m| {
            serde_json::to_writer(&mut metrics, m)?;
            metrics.write_all(b"\n")?;
            if every > 0 && t.step % every == 0 {
                let path = ckpt_dir.join(format!("step-{:08}.nncq", t.step));
                save_checkpoint(&path, text, t)?;
                periodic.push(path);
            }
            last = Some(m.clone());
            Ok(())
        });
        if outcome.is_err() {
            break;
        }
    }
    metrics.flush().map_err(io_err(metrics_path))?;
    artifacts.checkpoints = periodic;
    // a failed step leaves the trainer at the last good step
    let name = if outcome.is_ok() {
        "final.nncq"
    } else {
        "last-good.nncq"
    };
    let path = ckpt_dir.join(name);
    save_checkpoint(&path, text, &trainer)?;
    artifacts.final_checkpoint = Some(path);
    outcome?;
    Ok((trainer.step, last))
}

/// One line of `eval.jsonl`.
#[derive(Clone, Debug, Serialize)]
pub struct EvalRecord {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub data: String,
    pub label_fraction: f64,
    pub top1: f64,
    pub top5: Option<f64>,
    pub train_samples: usize,
}

fn default_run_dir(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(name) if name == "checkpoints" => {
            parent.parent().unwrap_or(Path::new(".")).to_path_buf()
        }
        _ => parent.to_path_buf(),
    }
}

pub fn eval(args: &EvalArgs) -> CliResult<EvalRecord> {
    let header = load_header(&args.checkpoint)?;
    let mut doc = ConfigDoc::parse(&header.config_text)?;
    doc.apply_data_spec(&args.data)?;
    if let Some(f) = args.label_fraction {
        doc.set("probe.label_fraction", &f.to_string())?;
    }
    let cfg = doc.build()?;
    let (step, probe) = match header.scalar_bytes {
        4 => eval_typed::<f32>(&args.checkpoint, &cfg)?,
        _ => eval_typed::<f64>(&args.checkpoint, &cfg)?,
    };
    let record = EvalRecord {
        checkpoint: args.checkpoint.clone(),
        step,
        data: args.data.clone(),
        label_fraction: cfg.probe.label_fraction,
        top1: probe.top1,
        top5: probe.top5,
        train_samples: probe.train_samples,
    };
    let dir = args
        .run_dir
        .clone()
        .unwrap_or_else(|| default_run_dir(&args.checkpoint));
    let path = dir.join("eval.jsonl");
    let mut line = serde_json::to_vec(&record).map_err(Error::from)?;
    line.push(b'\n');
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    file.write_all(&line).map_err(io_err(&path))?;
    Ok(record)
}

fn eval_typed<T: Scalar>(path: &Path, cfg: &RunConfig) -> CliResult<(u64, ProbeResult)> {
    let ckpt = load_checkpoint::<T>(path)?;
    let (train, test) = cfg.data.load::<T>()?;
    let probe = linear_probe(&ckpt.trainer.model, &train, &test, &cfg.probe)?;
    Ok((ckpt.trainer.step, probe))
}

/// One CSV row of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis_value: String,
    pub seed: u64,
    pub top1: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_nn_match: Option<f64>,
    pub steps_per_sec: Option<f64>,
    pub queue_bytes: Option<usize>,
    /// `ok`, or the error that stopped this row.
    pub status: String,
}

/// Outcome of one pretrain + probe run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunStats {
    pub top1: f64,
    pub final_loss: f64,
    pub final_nn_match: Option<f64>,
    pub steps_per_sec: f64,
    pub queue_bytes: usize,
}

pub fn ablate(args: &AblateArgs) -> CliResult<Vec<AblationRow>> {
    let base = load_config(&args.config, None, &args.overrides)?;
    base.build()?;
    let seeds: Vec<Option<u64>> = if args.seeds.is_empty() {
        vec![None]
    } else {
        args.seeds.iter().copied().map(Some).collect()
    };
    let jobs: Vec<(String, Option<u64>)> = args
        .values
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();

    let run_job = |(value, seed): &(String, Option<u64>)| -> AblationRow {
        let mut doc = base.clone();
        let value_for_axis = match (args.axis, value.as_str()) {
            (Axis::PredHead, "on") => "true",
            (Axis::PredHead, "off") => "false",
            (_, v) => v,
        };
        let outcome = doc
            .set(args.axis.key(), value_for_axis)
            .and_then(|_| seed.map_or(Ok(()), |s| doc.set("seed", &s.to_string())))
            .and_then(|_| doc.build())
            .and_then(|cfg| {
                let seed = cfg.train.seed;
                match cfg.precision {
                    Precision::F32 => pretrain_and_probe::<f32>(&cfg),
                    Precision::F64 => pretrain_and_probe::<f64>(&cfg),
                }
                .map(|s| (seed, s))
            });
        match outcome {
            Ok((seed, s)) => AblationRow {
                axis_value: value.clone(),
                seed,
                top1: Some(s.top1),
                final_loss: Some(s.final_loss),
                final_nn_match: s.final_nn_match,
                steps_per_sec: Some(s.steps_per_sec),
                queue_bytes: Some(s.queue_bytes),
                status: "ok".into(),
            },
            Err(e) => AblationRow {
                axis_value: value.clone(),
                seed: seed
                    .or_else(|| base.get("seed").and_then(|s| s.parse().ok()))
                    .unwrap_or(0),
                top1: None,
                final_loss: None,
                final_nn_match: None,
                steps_per_sec: None,
                queue_bytes: None,
                status: format!("error: {e}"),
            },
        }
    };

    let workers = args.parallel.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return Ok(jobs.iter().map(run_job).collect());
    }
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<AblationRow>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(job) = jobs.get(i) else { break };
                *slots[i].lock().expect("row slot") = Some(run_job(job));
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().expect("row slot").expect("every job ran"))
        .collect())
}

/// In-memory pretraining followed by a linear probe on the test split.
pub fn pretrain_and_probe<T: Scalar>(cfg: &RunConfig) -> nnclr::Result<RunStats> {
    let (train, test) = cfg.data.load::<T>()?;
    let with_labels = cfg.diagnostic_labels || cfg.train.nn_kind == NnKind::Oracle;
    let labels = with_labels.then_some(train.labels.as_slice());
    let started = Instant::now();
    let out = nnclr::train::pretrain(&cfg.train, &train, labels)?;
    let secs = started.elapsed().as_secs_f64();
    let last = out
        .metrics
        .last()
        .ok_or_else(|| Error::InvalidArgument("run produced no steps".into()))?;
    let probe = linear_probe(&out.trainer.model, &train, &test, &cfg.probe)?;
    Ok(RunStats {
        top1: probe.top1,
        final_loss: last.loss,
        final_nn_match: last.nn_match,
        steps_per_sec: out.metrics.len() as f64 / secs.max(1e-9),
        queue_bytes: out.trainer.queue_bytes(),
    })
}

pub fn write_csv<W: Write>(out: W, rows: &[AblationRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    w.flush().map_err(io_err(Path::new("<csv>")))
}

pub fn gradcheck<W: Write>(args: &GradcheckArgs, out: &mut W) -> CliResult<()> {
    let reports = run_gradcheck(args.seeds)?;
    let stdout = Path::new("<stdout>");
    for r in &reports {
        writeln!(
            out,
            "{:<26} worst_rel_err={:.3e} seeds={} {}",
            r.component,
            r.worst_rel_err,
            r.seeds,
            if r.passed { "ok" } else { "FAIL" }
        )
        .map_err(io_err(stdout))?;
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.component)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}
