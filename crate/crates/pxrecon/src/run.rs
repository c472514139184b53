//! Training and evaluation runs that read a manifest and write checkpoints,
//! logs and JSON reports into an output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pxrecon_core::fusion::{JointExample, JointStepLog, JointTrainer, Task};
use pxrecon_core::metrics::{
    classification_report, dsc_volumes, mask_metrics, psnr_volumes, ssim_volumes, ClassificationReport, MetricReport,
    ThresholdRule,
};
use pxrecon_core::pgr::{predict_volume, PgrTrainer, ReconExample, StepLog};
use pxrecon_core::volume::{Image, Volume};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, ExperimentTask, ReconSource};
use crate::dataset::{load_records, Loaded, Manifest, Split};
use crate::error::{Error, Result};
use crate::fsutil;

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const INIT_CKPT: &str = "init.pxck";
pub const LAST_CKPT: &str = "last.pxck";
pub const FINAL_CKPT: &str = "final.pxck";
pub const REPORT_FILE: &str = "report.json";

/// Resolved configuration written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub manifest: PathBuf,
    pub resumed_from: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub init_hash: Option<String>,
    pub final_hash: String,
    pub report: MetricReport,
}

fn write_log<L: Serialize>(path: &Path, prior: &[serde_json::Value], log: &[L]) -> Result<()> {
    let mut out = Vec::new();
    for v in prior {
        serde_json::to_writer(&mut out, v)?;
        out.push(b'\n');
    }
    for l in log {
        serde_json::to_writer(&mut out, l)?;
        out.push(b'\n');
    }
    fsutil::write_atomic(path, &out)
}

/// Log lines of a previous run with `step < upto`.
fn prior_log(path: &Path, upto: u64) -> Result<Vec<serde_json::Value>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8_lossy(&fsutil::read(path)?).into_owned();
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s < upto) {
            out.push(v);
        }
    }
    Ok(out)
}

fn start(out: &Path, cfg: &ExperimentConfig, manifest: &Path, resume: Option<&Path>) -> Result<String> {
    let hash = cfg.hash();
    fsutil::write_json(
        &out.join(CONFIG_FILE),
        &ResolvedConfig {
            config: cfg.clone(),
            config_hash: hash.clone(),
            manifest: manifest.to_path_buf(),
            resumed_from: resume.map(Path::to_path_buf),
        },
    )?;
    Ok(hash)
}

fn split_or_all(m: &Manifest, split: Split) -> Result<Vec<Loaded>> {
    let recs = m.split(split);
    if recs.is_empty() {
        return Err(Error::Invalid(format!("manifest has no {split:?} samples")));
    }
    load_records(m, &recs)
}

pub fn recon_examples(data: &[Loaded], trainer: &PgrTrainer) -> Result<Vec<ReconExample>> {
    data.iter()
        .map(|s| Ok(ReconExample::new(&s.px, &s.unfolded, &trainer.model.cfg, &trainer.weights)?))
        .collect()
}

/// Mean PSNR, SSIM and high-density DSC of reconstructions against the
/// ground-truth unfolded volumes.
pub fn recon_report(pairs: &[(Volume, Volume)]) -> Result<MetricReport> {
    let mut sums = [0.0; 3];
    for (rec, gt) in pairs {
        sums[0] += psnr_volumes(rec, gt)?;
        sums[1] += ssim_volumes(rec, gt)?;
        sums[2] += dsc_volumes(rec, gt, ThresholdRule::OwnMean)?;
    }
    let n = pairs.len().max(1) as f64;
    let mut r = MetricReport {
        count: pairs.len(),
        ..Default::default()
    };
    r.insert("psnr", sums[0] / n);
    r.insert("ssim", sums[1] / n);
    r.insert("dsc", sums[2] / n);
    Ok(r)
}

pub fn train_recon(manifest_path: &Path, out: &Path, cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunSummary> {
    if cfg.task != ExperimentTask::Recon {
        return Err(Error::Invalid(format!("train-recon needs task recon, got {:?}", cfg.task)));
    }
    let m = Manifest::load(manifest_path)?;
    let hash = start(out, cfg, manifest_path, resume)?;
    let train = split_or_all(&m, Split::Train)?;
    let (mut tr, init_hash) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut tr = ck.pgr_trainer(p)?;
            tr.cfg.steps = cfg.steps;
            (tr, None)
        }
        None => {
            let tr = PgrTrainer::new(cfg.dims.pgr(), cfg.pgr_train())?;
            let h = Checkpoint::of_pgr(&tr, &hash).save(&out.join(INIT_CKPT))?;
            (tr, Some(h))
        }
    };
    let data = recon_examples(&train, &tr)?;
    let log_path = out.join(LOG_FILE);
    let prior = prior_log(&log_path, tr.step)?;
    let mut log: Vec<StepLog> = Vec::new();
    while tr.step < cfg.steps {
        log.push(tr.train_step(&data)?);
        if cfg.checkpoint_every > 0 && tr.step % cfg.checkpoint_every == 0 {
            Checkpoint::of_pgr(&tr, &hash).save(&out.join(LAST_CKPT))?;
            write_log(&log_path, &prior, &log)?;
        }
    }
    write_log(&log_path, &prior, &log)?;
    let final_hash = Checkpoint::of_pgr(&tr, &hash).save(&out.join(FINAL_CKPT))?;
    let pairs = train
        .iter()
        .map(|s| Ok((tr.predict(&s.px)?, s.unfolded.clone())))
        .collect::<Result<Vec<_>>>()?;
    let report = recon_report(&pairs)?;
    let summary = RunSummary {
        steps: tr.step,
        init_hash,
        final_hash,
        report,
    };
    fsutil::write_json(&out.join(REPORT_FILE), &summary)?;
    Ok(summary)
}

/// Volume input for each sample: its ground truth or a frozen
/// reconstruction.
pub fn volumes_for(data: &[Loaded], source: &ReconSource) -> Result<Vec<Volume>> {
    match source {
        ReconSource::Gt => Ok(data.iter().map(|s| s.unfolded.clone()).collect()),
        ReconSource::Checkpoint(p) => {
            let p = Path::new(p);
            let mut tr = Checkpoint::load(p)?.pgr_trainer(p)?;
            data.iter()
                .map(|s| Ok(predict_volume(&tr.model, &mut tr.store, &s.px)?))
                .collect()
        }
    }
}

pub fn joint_examples(data: &[Loaded], vols: &[Volume]) -> Result<Vec<JointExample>> {
    data.iter()
        .zip(vols)
        .map(|(s, v)| Ok(JointExample::new(&s.px, v, s.record.class_id, s.mask.as_ref())?))
        .collect()
}

fn class_target(task: Task, ex: &mut [JointExample]) {
    if task == Task::Cls2 {
        for e in ex.iter_mut() {
            e.class_id = (e.class_id != 0) as usize;
        }
    }
}

fn task_samples(m: &Manifest, split: Split, task: Task) -> Result<Vec<Loaded>> {
    let mut data = split_or_all(m, split)?;
    if task == Task::Seg {
        data.retain(|s| s.mask.is_some());
        if data.is_empty() {
            return Err(Error::Invalid(format!("no {split:?} samples with lesion masks")));
        }
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub metrics: MetricReport,
    pub classification: Option<ClassificationReport>,
}

/// Evaluates a joint model on prepared examples.
pub fn joint_report(tr: &mut JointTrainer, ex: &[JointExample]) -> Result<JointReport> {
    let idx: Vec<usize> = (0..ex.len()).collect();
    let task = tr.model.cfg.task;
    match task.classes() {
        Some(k) => {
            let preds = tr.predict_classes(ex, &idx)?;
            let labels: Vec<usize> = ex.iter().map(|e| e.class_id).collect();
            let rep = classification_report(&preds, &labels, k)?;
            let mut metrics = MetricReport {
                count: ex.len(),
                per_class: Some(rep.per_class.clone()),
                ..Default::default()
            };
            metrics.insert("accuracy", rep.accuracy);
            metrics.insert("macro_precision", rep.macro_precision);
            metrics.insert("macro_recall", rep.macro_recall);
            Ok(JointReport {
                metrics,
                classification: Some(rep),
            })
        }
        None => {
            let preds = tr.predict_masks(ex, &idx)?;
            let mut sums = BTreeMap::<&str, f64>::new();
            for (p, e) in preds.iter().zip(ex) {
                let gt = e.mask.as_ref().ok_or_else(|| Error::Invalid("sample without mask".into()))?;
                let gt = Image::from_vec(p.h, p.w, gt.data().to_vec())?;
                let mm = mask_metrics(p, &gt)?;
                for (k, v) in [("dsc", mm.dsc), ("iou", mm.iou), ("precision", mm.precision), ("recall", mm.recall)] {
                    *sums.entry(k).or_default() += v;
                }
            }
            let mut metrics = MetricReport {
                count: ex.len(),
                ..Default::default()
            };
            for (k, v) in sums {
                metrics.insert(k, v / ex.len().max(1) as f64);
            }
            Ok(JointReport {
                metrics,
                classification: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub steps: u64,
    pub init_hash: Option<String>,
    pub final_hash: String,
    pub train: JointReport,
    pub test: Option<JointReport>,
}

pub fn train_joint(manifest_path: &Path, out: &Path, cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<JointSummary> {
    let model_cfg = cfg
        .joint_model()
        .ok_or_else(|| Error::Invalid("train-cls/train-seg need a classification or segmentation task".into()))?;
    let task = model_cfg.task;
    let m = Manifest::load(manifest_path)?;
    let hash = start(out, cfg, manifest_path, resume)?;
    let train = task_samples(&m, Split::Train, task)?;
    let mut ex = joint_examples(&train, &volumes_for(&train, &cfg.recon)?)?;
    class_target(task, &mut ex);
    let (mut tr, init_hash) = match resume {
        Some(p) => {
            let mut tr = Checkpoint::load(p)?.joint_trainer(p)?;
            tr.cfg.steps = cfg.steps;
            (tr, None)
        }
        None => {
            let tr = JointTrainer::new(model_cfg, cfg.joint_train())?;
            let h = Checkpoint::of_joint(&tr, &hash).save(&out.join(INIT_CKPT))?;
            (tr, Some(h))
        }
    };
    let log_path = out.join(LOG_FILE);
    let prior = prior_log(&log_path, tr.step)?;
    let mut log: Vec<JointStepLog> = Vec::new();
    while tr.step < cfg.steps {
        log.push(tr.train_step(&ex)?);
        if cfg.checkpoint_every > 0 && tr.step % cfg.checkpoint_every == 0 {
            Checkpoint::of_joint(&tr, &hash).save(&out.join(LAST_CKPT))?;
            write_log(&log_path, &prior, &log)?;
        }
    }
    write_log(&log_path, &prior, &log)?;
    let final_hash = Checkpoint::of_joint(&tr, &hash).save(&out.join(FINAL_CKPT))?;
    let train_rep = joint_report(&mut tr, &ex)?;
    let test = match task_samples(&m, Split::Test, task) {
        Ok(data) => {
            let mut tex = joint_examples(&data, &volumes_for(&data, &cfg.recon)?)?;
            class_target(task, &mut tex);
            Some(joint_report(&mut tr, &tex)?)
        }
        Err(Error::Invalid(_)) => None,
        Err(e) => return Err(e),
    };
    let summary = JointSummary {
        steps: tr.step,
        init_hash,
        final_hash,
        train: train_rep,
        test,
    };
    fsutil::write_json(&out.join(REPORT_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub class_id: usize,
}

/// Scores class predictions (one JSON object per line) against a manifest.
pub fn eval_predictions(m: &Manifest, predictions: &Path, split: Option<Split>, k: usize) -> Result<ClassificationReport> {
    let text = String::from_utf8_lossy(&fsutil::read(predictions)?).into_owned();
    let mut by_id = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: Prediction = serde_json::from_str(line)
            .map_err(|e| Error::format(predictions, "prediction", format!("line {}: {e}", i + 1)))?;
        by_id.insert(p.id, p.class_id);
    }
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for r in m.records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
        let p = by_id
            .get(&r.id)
            .ok_or_else(|| Error::format(predictions, "id", format!("no prediction for {}", r.id)))?;
        preds.push(*p);
        labels.push(if k == 2 { r.binary_label } else { r.class_id });
    }
    Ok(classification_report(&preds, &labels, k)?)
}

/// Evaluates a checkpoint of either kind on a manifest split.
pub fn eval_checkpoint(m: &Manifest, ckpt: &Path, split: Split, recon: &ReconSource) -> Result<serde_json::Value> {
    let ck = Checkpoint::load(ckpt)?;
    let data = split_or_all(m, split)?;
    match &ck.header.spec {
        crate::checkpoint::ModelSpec::Pgr { .. } => {
            let mut tr = ck.pgr_trainer(ckpt)?;
            let pairs = data
                .iter()
                .map(|s| Ok((tr.predict(&s.px)?, s.unfolded.clone())))
                .collect::<Result<Vec<_>>>()?;
            Ok(serde_json::to_value(recon_report(&pairs)?)?)
        }
        crate::checkpoint::ModelSpec::Joint { model, .. } => {
            let task = model.task;
            let mut tr = ck.joint_trainer(ckpt)?;
            let data = task_samples(m, split, task)?;
            let mut ex = joint_examples(&data, &volumes_for(&data, recon)?)?;
            class_target(task, &mut ex);
            Ok(serde_json::to_value(joint_report(&mut tr, &ex)?)?)
        }
    }
}
