//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pxrecon_core::autodiff::CmaMode;
use pxrecon_core::optim::LrSchedule;
use pxrecon_core::pgr::AlphaSchedule;
use serde::Serialize;

use crate::config::{env_seed, Dims, ExperimentConfig, ExperimentTask, ReconSource};
use crate::dataset::{generate_dataset, GenConfig, Manifest, Split};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::png16::{write_png16, Sidecar};
use crate::render::{render_mip, render_threshold, Axis};
use crate::run;
use crate::table::text_table;
use crate::rvol::read_volume;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pxrecon", version, about = "Panoramic-to-volume reconstruction and 2D-3D joint analysis on phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantoms, their seven acquisitions each, and a manifest.
    GenData(GenArgs),
    /// Train the reconstruction network.
    TrainRecon(ReconArgs),
    /// Train the joint model for misalignment classification.
    TrainCls(JointArgs),
    /// Train the joint model for lesion segmentation.
    TrainSeg(JointArgs),
    /// Score a checkpoint or a predictions file against a manifest.
    Eval(EvalArgs),
    /// Render a volume as an image.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of phantoms (seven samples each).
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Dims::Desk)]
    pub dims: Dims,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Override the phantom lesion probability.
    #[arg(long)]
    pub lesion_probability: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Dims::Desk)]
    pub dims: Dims,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate (the schedule shape is fixed per task).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = parse_alpha, default_value = "paper")]
    pub alpha_schedule: AlphaSchedule,
}

#[derive(Debug, Args)]
pub struct JointArgs {
    #[command(flatten)]
    pub common: Common,
    /// 2 (regular vs misaligned) or 5 (misalignment type); ignored by train-seg.
    #[arg(long, default_value_t = 5, value_parser = parse_classes)]
    pub classes: usize,
    /// `gt` for ground-truth volumes or a reconstruction checkpoint path.
    #[arg(long, default_value = "gt")]
    pub recon: ReconSource,
    /// Drop the 3D branch (2D-only baseline).
    #[arg(long)]
    pub no_fusion: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = parse_cma)]
    pub cma_mode: Option<CmaMode>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// JSON lines `{"id": ..., "class_id": ...}`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    #[arg(long, default_value_t = 5, value_parser = parse_classes)]
    pub classes: usize,
    #[arg(long, default_value = "gt")]
    pub recon: ReconSource,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Mip,
    Threshold,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long, value_enum, default_value_t = RenderMode::Mip)]
    pub mode: RenderMode,
    /// Storage axis to project along; defaults to the depth axis.
    #[arg(long, value_enum)]
    pub axis: Option<Axis>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_classes(s: &str) -> std::result::Result<usize, String> {
    match s {
        "2" => Ok(2),
        "5" => Ok(5),
        _ => Err(format!("{s:?} classes (2 or 5)")),
    }
}

fn parse_alpha(s: &str) -> std::result::Result<AlphaSchedule, String> {
    match s {
        "paper" => Ok(AlphaSchedule::Paper),
        "reversed" => Ok(AlphaSchedule::Reversed),
        _ => Err(format!("unknown alpha schedule {s:?} (paper, reversed)")),
    }
}

fn parse_cma(s: &str) -> std::result::Result<CmaMode, String> {
    match s {
        "literal" => Ok(CmaMode::Literal),
        "inclusive" => Ok(CmaMode::Inclusive),
        _ => Err(format!("unknown contrastive mode {s:?} (literal, inclusive)")),
    }
}

fn experiment(task: ExperimentTask, c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(task, c.dims);
    cfg.seed = c.seed;
    if let Some(s) = c.steps {
        cfg.steps = s;
        if task == ExperimentTask::Seg {
            cfg.schedule = LrSchedule::segmentation(s);
        }
    }
    if let Some(b) = c.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = c.lr {
        cfg.schedule = cfg.schedule.with_base(lr);
    }
    cfg.checkpoint_every = c.checkpoint_every;
    cfg.with_env_seed()
}

fn joint_experiment(task: ExperimentTask, a: &JointArgs) -> Result<ExperimentConfig> {
    let mut cfg = experiment(task, &a.common)?;
    cfg.recon = a.recon.clone();
    cfg.fusion = !a.no_fusion;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if let Some(m) = a.cma_mode {
        cfg.cma_mode = m;
    }
    Ok(cfg)
}

/// `report.json` -> `report.config.json`.
fn config_beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => {
            let seed = env_seed()?.unwrap_or(a.seed);
            let cfg = GenConfig {
                val_fraction: a.val_fraction,
                test_fraction: a.test_fraction,
                lesion_probability: a.lesion_probability,
                ..GenConfig::new(a.count, seed, a.dims)
            };
            let m = generate_dataset(&a.out, &cfg)?;
            eprintln!("wrote {} samples to {}", m.records.len(), a.out.display());
            Ok(())
        }
        Command::TrainRecon(a) => {
            let mut cfg = experiment(ExperimentTask::Recon, &a.common)?;
            cfg.alpha = a.alpha_schedule;
            let s = run::train_recon(&a.common.manifest, &a.common.out, &cfg, a.common.resume.as_deref())?;
            print_json(&s)
        }
        Command::TrainCls(a) => {
            let task = if a.classes == 2 { ExperimentTask::Cls2 } else { ExperimentTask::Cls5 };
            let cfg = joint_experiment(task, &a)?;
            print_json(&run::train_joint(&a.common.manifest, &a.common.out, &cfg, a.common.resume.as_deref())?)
        }
        Command::TrainSeg(a) => {
            let cfg = joint_experiment(ExperimentTask::Seg, &a)?;
            print_json(&run::train_joint(&a.common.manifest, &a.common.out, &cfg, a.common.resume.as_deref())?)
        }
        Command::Eval(a) => {
            let m = Manifest::load(&a.manifest)?;
            let report = match (&a.checkpoint, &a.predictions) {
                (Some(c), _) => run::eval_checkpoint(&m, c, a.split.unwrap_or(Split::Test), &a.recon)?,
                (None, Some(p)) => serde_json::to_value(run::eval_predictions(&m, p, a.split, a.classes)?)?,
                (None, None) => return Err(Error::Invalid("eval needs --checkpoint or --predictions".into())),
            };
            fsutil::write_json(&a.out, &report)?;
            let text = text_table(&report);
            fsutil::write_atomic(&a.out.with_extension("txt"), text.as_bytes())?;
            fsutil::write_json(
                &config_beside(&a.out),
                &serde_json::json!({
                    "command": "eval",
                    "manifest": a.manifest,
                    "checkpoint": a.checkpoint,
                    "predictions": a.predictions,
                    "split": a.split,
                    "classes": a.classes,
                    "recon": a.recon,
                }),
            )?;
            print_json(&report)?;
            print!("{text}");
            Ok(())
        }
        Command::Render(a) => {
            let v = read_volume(&a.volume)?;
            let axis = a.axis.unwrap_or_else(|| Axis::depth_of(&v));
            let img = match a.mode {
                RenderMode::Mip => render_mip(&v, axis),
                RenderMode::Threshold => render_threshold(&v, axis),
            };
            write_png16(&img, &a.out, &Sidecar::for_image(&img))?;
            fsutil::write_json(
                &config_beside(&a.out),
                &serde_json::json!({"command": "render", "volume": a.volume, "mode": a.mode, "axis": axis}),
            )
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
