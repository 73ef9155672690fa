//! `vinpaint`: synthesize corpora, train, run inference, evaluate and serve.
//!
//! Every subcommand reads the same configuration (file plus `--set`
//! overrides), writes the resolved snapshot next to its output and reports
//! failures as a single JSON line on stderr.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use vinpaint::checkpoint::CheckpointBundle;
use vinpaint::config::AppConfig;
use vinpaint::inference::{
    load_annotations_dir, load_frames_dir, propagate, write_result, AnnotationSet, InpaintModel,
    OracleModel,
};
use vinpaint::metrics::evaluate_corpus;
use vinpaint::synth::{generate_corpus, load_clip, read_manifest, NoiseBank};
use vinpaint::train::train_loop;
use vinpaint::{Error, Result};

const SNAPSHOT_FILE: &str = "config.resolved.toml";

#[derive(Parser, Debug)]
#[command(name = "vinpaint", version, about = "Semi-supervised video inpainting")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.channels=16`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corruption dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Directory of PNG noise images; procedural noise when absent.
        #[arg(long)]
        noise_dir: Option<PathBuf>,
    },
    /// Train both networks on the `train` split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.safetensors` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Complete clips from sparse mask annotations.
    Infer {
        /// Checkpoint to load.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use ground truth from `--data` instead of a model.
        #[arg(long, requires = "data", conflicts_with = "checkpoint")]
        oracle: bool,
        /// Dataset root; every clip of `infer.split` is processed, annotated
        /// with its ground-truth masks at `infer.annotate`.
        #[arg(long, conflicts_with_all = ["clip", "annotations"])]
        data: Option<PathBuf>,
        /// Directory of frames `00000.png, 00001.png, ...`.
        #[arg(long, requires = "annotations")]
        clip: Option<PathBuf>,
        /// Directory of masks named by frame index.
        #[arg(long, requires = "clip")]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score inference results against a dataset's ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; the table goes next to it with a `.txt` extension.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        work_dir: PathBuf,
        /// Overrides `serve.port`.
        #[arg(long)]
        port: Option<u16>,
    },
}

fn write_snapshot(dir: &Path, cfg: &AppConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SNAPSHOT_FILE);
    std::fs::write(&path, cfg.snapshot()).map_err(|e| Error::io(&path, e))
}

fn split_filter(split: &str) -> Option<&str> {
    (split != "all").then_some(split)
}

fn synth(cfg: &AppConfig, out: &Path, noise_dir: Option<&Path>) -> Result<serde_json::Value> {
    write_snapshot(out, cfg)?;
    let bank = noise_dir
        .map(|d| NoiseBank::load_dir(d, cfg.data.height, cfg.data.width))
        .transpose()?;
    let records = generate_corpus(out, &cfg.data, bank.as_ref())?;
    Ok(serde_json::json!({ "clips": records.len(), "out": out }))
}

fn train(cfg: &AppConfig, data: &Path, out: &Path, resume: bool) -> Result<serde_json::Value> {
    write_snapshot(out, cfg)?;
    let bundle = train_loop(data, &cfg.train_config(), out, resume)?;
    Ok(serde_json::json!({ "steps": bundle.step, "out": out }))
}

fn load_model(path: &Path) -> Result<vinpaint::model::Model<f32>> {
    Ok(CheckpointBundle::load(path)?.model)
}

fn infer(
    cfg: &AppConfig,
    checkpoint: Option<&Path>,
    oracle: bool,
    data: Option<&Path>,
    clip: Option<(&Path, &Path)>,
    out: &Path,
) -> Result<serde_json::Value> {
    write_snapshot(out, cfg)?;
    let model = checkpoint.map(load_model).transpose()?;
    if let Some((clip_dir, ann_dir)) = clip {
        let model = model.expect("clap requires a checkpoint without --oracle");
        let frames = load_frames_dir(clip_dir)?;
        let annotations = load_annotations_dir(ann_dir, frames.len())?;
        let result = propagate(&model, &frames, &annotations)?;
        let id = clip_dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("clip")
            .to_owned();
        write_result(out, &id, &result)?;
        return Ok(serde_json::json!({ "clips": 1, "frames": frames.len(), "out": out }));
    }
    let data = data.ok_or_else(|| Error::Config("infer needs --data or --clip".into()))?;
    let split = split_filter(&cfg.infer.split);
    let mut clips = 0;
    for record in read_manifest(data)?
        .into_iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
    {
        let clip = load_clip(data, &record)?;
        let mut annotations = AnnotationSet::new(clip.len());
        for &t in &cfg.infer.annotate {
            if t >= clip.len() {
                return Err(Error::Config(format!(
                    "infer.annotate index {t} outside clip {} of {} frames",
                    record.clip_id,
                    clip.len()
                )));
            }
            annotations.insert(t, clip.masks[t].clone())?;
        }
        let oracle_model;
        let runner: &dyn InpaintModel = if oracle {
            oracle_model = OracleModel {
                gt_frames: clip.gt_frames.clone(),
                gt_masks: clip.masks.clone(),
                ref_radius: cfg.model.ref_radius,
            };
            &oracle_model
        } else {
            model.as_ref().expect("clap requires a checkpoint without --oracle")
        };
        let result = propagate(runner, &clip.frames, &annotations)?;
        write_result(&out.join(&record.clip_id), &record.clip_id, &result)?;
        clips += 1;
    }
    Ok(serde_json::json!({ "clips": clips, "out": out }))
}

fn eval(cfg: &AppConfig, results: &Path, data: &Path, report: &Path) -> Result<serde_json::Value> {
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_snapshot(dir, cfg)?;
    }
    let r = evaluate_corpus(results, data, split_filter(&cfg.eval.split))?;
    std::fs::write(report, r.to_jsonl()).map_err(|e| Error::io(report, e))?;
    let table = report.with_extension("txt");
    std::fs::write(&table, r.table()).map_err(|e| Error::io(&table, e))?;
    print!("{}", r.table());
    Ok(serde_json::json!({
        "clips": r.clips.len(),
        "frames": r.corpus.frames,
        "psnr": r.corpus.psnr,
        "ssim": r.corpus.ssim,
        "iou": r.corpus.iou,
        "bce": r.corpus.bce,
        "report": report,
    }))
}

fn serve(cfg: &AppConfig, checkpoint: &Path, work_dir: &Path, port: Option<u16>) -> Result<serde_json::Value> {
    write_snapshot(work_dir, cfg)?;
    let model = load_model(checkpoint)?;
    let state = vinpaint_server::AppState::open(work_dir, Arc::new(model))?;
    let addr: SocketAddr = format!("{}:{}", cfg.serve.host, port.unwrap_or(cfg.serve.port))
        .parse()
        .map_err(|e| Error::Config(format!("serve address: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io(work_dir, e))?;
    runtime
        .block_on(vinpaint_server::serve(state, addr))
        .map_err(|e| Error::io(work_dir, e))?;
    Ok(serde_json::json!({ "stopped": true }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = AppConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Synth { out, noise_dir } => synth(&cfg, out, noise_dir.as_deref()),
        Command::Train { data, out, resume } => train(&cfg, data, out, *resume),
        Command::Infer {
            checkpoint,
            oracle,
            data,
            clip,
            annotations,
            out,
        } => infer(
            &cfg,
            checkpoint.as_deref(),
            *oracle,
            data.as_deref(),
            clip.as_deref().zip(annotations.as_deref()),
            out,
        ),
        Command::Eval {
            results,
            data,
            report,
        } => eval(&cfg, results, data, report),
        Command::Serve {
            checkpoint,
            work_dir,
            port,
        } => serve(&cfg, checkpoint, work_dir, *port),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": e.kind() })
            );
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
