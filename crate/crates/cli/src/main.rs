//! `mvgd`: train, run and evaluate the video glass detector from the shell.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mvgd_core::dataset::{load_dataset, load_video, save_video, synthetic_videos};
use mvgd_core::eval::MetricParams;
use mvgd_core::flow::{
    compute_flow, write_flo, BlockMatching, ExternalCommand, FileProvider, FramePair,
};
use mvgd_core::pipeline::{dataset_stats, evaluate_dirs, infer_video, write_masks};
use mvgd_core::train::build_samples;
use mvgd_core::{
    Error, ErrorKind, FlowProvider, ModelConfig, MvgdNet, OptimConfig, Trainer, Variant,
};

#[derive(Parser, Debug)]
#[command(
    name = "mvgd",
    version,
    about = "Motion-aware video glass surface detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on an annotated dataset directory.
    Train(TrainArgs),
    /// Predict one mask per frame for every video in a directory.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Glass location heat map and color contrast of a dataset.
    Stats(StatsArgs),
    /// Generate synthetic motion-inconsistency clips.
    Synth(SynthArgs),
    /// Estimate and store `.flo` files for every video.
    FlowPrecompute(FlowArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProviderKind {
    /// Run `--flow-cmd prev.png next.png out.flo` per frame pair.
    External,
    /// Read `<video>/flow/NNNNNN.flo`.
    Files,
    /// Built-in exhaustive block matching.
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "UPPER")]
enum AblateArg {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl From<AblateArg> for Variant {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::A => Variant::A,
            AblateArg::B => Variant::B,
            AblateArg::C => Variant::C,
            AblateArg::D => Variant::D,
            AblateArg::E => Variant::E,
            AblateArg::F => Variant::F,
            AblateArg::G => Variant::G,
        }
    }
}

#[derive(Args, Debug)]
struct ProviderArgs {
    #[arg(long, value_enum, default_value = "files")]
    flow_provider: ProviderKind,
    /// Estimator program for `--flow-provider external`; extra words are
    /// passed before the three paths.
    #[arg(long, num_args = 1.., value_delimiter = ' ')]
    flow_cmd: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Receives `checkpoint.bin`, `loss.jsonl` and `config.toml`.
    #[arg(long)]
    out: PathBuf,
    /// Model config (`key = value`); defaults to the tiny preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Continue from a checkpoint; model and optimizer settings come from it.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Masks go to `<out>/<video>/NNNNNN.png`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0.3)]
    beta_sq: f64,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Receives `location.png` and `stats.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FlowArgs {
    #[arg(long)]
    data: PathBuf,
    /// Dataset root to write `<video>/flow/` into; defaults to `--data`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "synthetic")]
    flow_provider: ProviderKind,
    #[arg(long, num_args = 1.., value_delimiter = ' ')]
    flow_cmd: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
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
    match e.downcast_ref::<Error>().map(Error::kind) {
        Some(ErrorKind::Usage) => 1,
        Some(ErrorKind::Numeric) => 3,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Synth(a) => synth(a),
        Command::FlowPrecompute(a) => flow_precompute(a),
    }
}

/// Estimator for providers that compute flow; `None` for `files`.
fn estimator(kind: ProviderKind, cmd: &[String]) -> Result<Option<Box<dyn FlowProvider>>> {
    Ok(match kind {
        ProviderKind::Files => None,
        ProviderKind::Synthetic => Some(Box::new(BlockMatching::default())),
        ProviderKind::External => {
            let (program, args) = cmd
                .split_first()
                .ok_or_else(|| Error::Config("--flow-provider external needs --flow-cmd".into()))?;
            Some(Box::new(ExternalCommand {
                program: program.clone(),
                args: args.to_vec(),
            }))
        }
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => Trainer::load(path)?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => ModelConfig::load(p)?,
                None => ModelConfig::tiny(),
            };
            if let Some(v) = a.ablate {
                cfg = cfg.with_variant(v.into());
            }
            let defaults = OptimConfig::default();
            let optim = OptimConfig {
                lr: a.lr.unwrap_or(defaults.lr),
                batch: a.batch.unwrap_or(defaults.batch),
                weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
                epochs: a.epochs,
                seed: a.seed,
                ..defaults
            };
            Trainer::new(MvgdNet::new(cfg, a.seed)?, optim)?
        }
    };
    let mut videos = load_dataset(&a.data)?;
    let provider = estimator(a.provider.flow_provider, &a.provider.flow_cmd)?;
    if provider.is_some() {
        for v in &mut videos {
            v.flows = None;
        }
    }
    let samples = build_samples(&videos, provider.as_deref(), trainer.net.needs_flow())?;
    create_dir(&a.out)?;
    fs::write(a.out.join("config.toml"), trainer.net.cfg.to_kv_string())?;
    let log_path = a.out.join("loss.jsonl");
    let mut log = BufWriter::new(
        File::options()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?,
    );
    let per_epoch = samples.len().div_ceil(trainer.optim.batch) as u64;
    let target = per_epoch * a.epochs as u64 + if a.resume.is_some() { trainer.step } else { 0 };
    let ckpt = a.out.join("checkpoint.bin");
    while trainer.step < target {
        let steps = per_epoch.min(target - trainer.step);
        let logs = trainer.run(&samples, steps, Some(&mut log))?;
        log.flush()?;
        trainer.save(&ckpt)?;
        if let Some(last) = logs.last() {
            eprintln!(
                "step {} epoch {} loss {:.5} (l_p {:.5}, l_m {:.5})",
                last.step, last.epoch, last.loss.total, last.loss.l_p, last.loss.l_m
            );
        }
    }
    trainer.save(&ckpt)?;
    println!("{}", ckpt.display());
    Ok(())
}

/// Provider for one video: stored files or the shared estimator.
fn video_provider<'a>(
    estimator: Option<&'a dyn FlowProvider>,
    video_dir: &Path,
    files: &'a mut Option<FileProvider>,
) -> &'a dyn FlowProvider {
    match estimator {
        Some(p) => p,
        None => files.insert(FileProvider::new(video_dir.join("flow"))),
    }
}

fn video_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn infer(a: InferArgs) -> Result<()> {
    let net = Trainer::load(&a.checkpoint)?.net;
    let est = estimator(a.provider.flow_provider, &a.provider.flow_cmd)?;
    for dir in video_dirs(&a.data)? {
        let video = load_video(&dir)?;
        let mut files = None;
        let provider = video_provider(est.as_deref(), &dir, &mut files);
        let masks = infer_video(&net, &video.frames, provider)?;
        write_masks(&a.out.join(&video.id), &masks)?;
        eprintln!("{}: {} masks", video.id, masks.len());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let params = MetricParams {
        threshold: a.threshold,
        beta_sq: a.beta_sq,
    };
    let report = evaluate_dirs(&a.pred, &a.gt, params)?;
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_json(out, serde_json::to_value(&report)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let (heat, report) = dataset_stats(&a.data)?;
    create_dir(&a.out)?;
    heat.save_png(&a.out.join("location.png"))?;
    write_json(&a.out.join("stats.json"), serde_json::to_value(&report)?)?;
    println!(
        "{} masks, {} contrast values, {} single-class frames skipped",
        report.n_masks,
        report.chi2.len(),
        report.chi2_skipped
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let videos = synthetic_videos(a.count, a.size, a.frames, a.kappa, a.seed)?;
    create_dir(&a.out)?;
    for v in &videos {
        save_video(&a.out, v)?;
    }
    println!("{} clips in {}", videos.len(), a.out.display());
    Ok(())
}

fn flow_precompute(a: FlowArgs) -> Result<()> {
    let provider = estimator(a.flow_provider, &a.flow_cmd)?.ok_or_else(|| {
        Error::Config("flow-precompute needs an estimating provider, not files".into())
    })?;
    let out_root = a.out.as_deref().unwrap_or(&a.data);
    for dir in video_dirs(&a.data)? {
        let video = load_video(&dir)?;
        let flows = video
            .frames
            .windows(2)
            .enumerate()
            .map(|(k, w)| compute_flow(&FramePair::indexed(&w[0], &w[1], k + 1), provider.as_ref()))
            .collect::<mvgd_core::Result<Vec<_>>>()?;
        let flow_dir = out_root.join(&video.id).join("flow");
        create_dir(&flow_dir)?;
        for (k, f) in flows.iter().enumerate() {
            write_flo(f, &flow_dir.join(format!("{:06}.flo", k + 1)))?;
        }
        eprintln!("{}: {} flows", video.id, flows.len());
    }
    Ok(())
}
