//! Shared train and eval code paths used by the `train`, `eval` and `ablate` commands.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use semalign::checkpoint::{load_model, resume_trainer, save_checkpoint};
use semalign::config::{InferenceMode, TrainConfig};
use semalign::data::{self, Sample, Split, SplitManifest};
use semalign::eval::{evaluate, MetricAccumulator, MetricReport};
use semalign::objectives::LossReport;
use semalign::train::{mean_report, Trainer};
use semalign::{Error, Result};

use crate::log::Logger;

pub const CODE_HASH: &str = env!("SEMALIGN_SOURCE_HASH");
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: LossReport,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub code_hash: String,
    pub config: String,
    pub split: Option<String>,
    pub history: Vec<EpochRecord>,
}

impl RunManifest {
    fn new(cfg_text: &str, split: Option<&SplitManifest>) -> Self {
        let split_text = split.map(|s| s.to_text());
        let mut h = Sha256::new();
        h.update(CODE_HASH.as_bytes());
        h.update(cfg_text.as_bytes());
        h.update(split_text.as_deref().unwrap_or("").as_bytes());
        Self {
            run_id: hex_prefix(&h.finalize()),
            code_hash: CODE_HASH.to_string(),
            config: cfg_text.to_string(),
            split: split_text,
            history: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn parse_mode(mode: &str) -> Result<InferenceMode> {
    match mode {
        "single" => Ok(InferenceMode::Single),
        "sliding" => Ok(InferenceMode::Sliding),
        other => Err(Error::Config(format!("unknown inference mode {other:?} (single|sliding)"))),
    }
}

pub fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown dataset split {other:?} (train|test)"))),
    }
}

/// Labeled and unlabeled training samples. Without a split manifest every
/// training image is labeled and must have a mask.
pub fn training_samples(root: &Path, split: Option<&SplitManifest>, num_classes: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let Some(split) = split else {
        return Ok((data::load_dataset(root, Split::Train, num_classes)?, Vec::new()));
    };
    let mut samples = data::load_images(root, Split::Train)?;
    for s in &mut samples {
        if split.labeled_ids.contains(&s.id) {
            s.mask = Some(data::read_mask(&data::mask_path(root, Split::Train, &s.id))?);
            s.validate(num_classes)?;
        }
    }
    data::apply_split(samples, split)
}

/// Train into `out`, checkpointing after each epoch. With `resume`, continue
/// from the checkpoint already in `out`.
pub struct TrainRequest<'a> {
    pub cfg: TrainConfig,
    pub data: &'a Path,
    pub split: Option<&'a Path>,
    pub out: &'a Path,
    pub resume: bool,
    pub eval_every: Option<usize>,
    pub max_steps: Option<usize>,
}

pub fn train_run(req: TrainRequest<'_>, log: &mut Logger) -> Result<RunManifest> {
    create_dir(req.out)?;
    let device = Device::Cpu;
    let split = req.split.map(SplitManifest::load).transpose()?;
    let num_classes = req.cfg.data.num_classes;
    let (labeled, unlabeled) = training_samples(req.data, split.as_ref(), num_classes)?;
    let ckpt_dir = req.out.join(CHECKPOINT_DIR);
    let manifest_path = req.out.join(RUN_MANIFEST);

    let (mut trainer, mut manifest) = if req.resume {
        let trainer = resume_trainer(&ckpt_dir, labeled, unlabeled, &device)?;
        let mut manifest = RunManifest::load(&manifest_path)?;
        let done = trainer.epoch();
        manifest.history.retain(|r| r.epoch < done);
        (trainer, manifest)
    } else {
        req.cfg.validate()?;
        let cfg_text = req.cfg.to_toml_string()?;
        let trainer = Trainer::new(req.cfg, labeled, unlabeled, &device)?;
        (trainer, RunManifest::new(&cfg_text, split.as_ref()))
    };
    fs::write(req.out.join("config.toml"), &manifest.config).map_err(|e| Error::io(req.out, e))?;
    manifest.save(&manifest_path)?;

    let test_set = match req.eval_every {
        Some(_) => Some(data::load_dataset(req.data, Split::Test, num_classes)?),
        None => None,
    };
    log.record(
        "start",
        json!({
            "run_id": manifest.run_id,
            "step": trainer.step,
            "total_steps": trainer.total_steps,
            "iters_per_epoch": trainer.iters_per_epoch(),
        }),
    );

    let stop_at = req.max_steps.map_or(trainer.total_steps, |m| m.min(trainer.total_steps));
    while trainer.step < stop_at {
        let epoch = trainer.epoch();
        let epoch_end = ((epoch + 1) * trainer.iters_per_epoch()).min(stop_at);
        let reports = trainer.run_steps(epoch_end - trainer.step)?;
        let Some(last) = reports.last() else { break };
        let loss = mean_report(&reports);
        let epoch_done = trainer.step % trainer.iters_per_epoch() == 0;
        let metrics = match (&test_set, req.eval_every) {
            (Some(test), Some(every)) if epoch_done && every > 0 && (epoch + 1) % every == 0 => {
                Some(evaluate(&trainer.model, test, &trainer.cfg)?)
            }
            _ => None,
        };
        log.record(
            "epoch",
            json!({
                "epoch": epoch,
                "step": trainer.step,
                "lr": last.lr,
                "tau": trainer.threshold.tau,
                "loss": loss,
                "mdice": metrics.as_ref().map(|m| m.mdice),
            }),
        );
        save_checkpoint_atomic(&trainer, &ckpt_dir)?;
        if epoch_done {
            manifest.history.push(EpochRecord {
                epoch,
                step: trainer.step,
                lr: last.lr,
                tau: trainer.threshold.tau,
                loss,
                metrics,
            });
            manifest.save(&manifest_path)?;
        }
    }
    log.record("done", json!({ "step": trainer.step, "finished": trainer.is_finished() }));
    Ok(manifest)
}

fn save_checkpoint_atomic(trainer: &Trainer, dir: &Path) -> Result<()> {
    let staging = dir.with_extension("staging");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    save_checkpoint(trainer, &staging)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub split: Split,
    pub mode: Option<InferenceMode>,
    pub oracle: bool,
    pub ratio: &'a str,
    pub method: &'a str,
    pub out: &'a Path,
}

/// Evaluate a checkpoint and write `metrics.csv`, `metrics.json` and `summary.txt`.
pub fn eval_run(req: EvalRequest<'_>, log: &mut Logger) -> Result<MetricReport> {
    let (model, mut cfg) = load_model(req.checkpoint, &Device::Cpu)?;
    if let Some(mode) = req.mode {
        cfg.eval.mode = mode;
    }
    let num_classes = cfg.data.num_classes;
    let samples = data::load_dataset(req.data, req.split, num_classes)?;
    let report = if req.oracle {
        let mut acc = MetricAccumulator::new(num_classes, cfg.data.ignore_index);
        for s in &samples {
            let gt = s.mask.as_ref().expect("load_dataset attaches masks");
            acc.add(gt, gt)?;
        }
        acc.report()
    } else {
        evaluate(&model, &samples, &cfg)?
    };
    write_report(req.out, &report, num_classes, req.ratio, req.method)?;
    log.record(
        "eval",
        json!({ "n_images": report.n_images, "mdice": report.mdice, "mjaccard": report.mjaccard }),
    );
    Ok(report)
}

pub fn write_report(out: &Path, report: &MetricReport, num_classes: usize, ratio: &str, method: &str) -> Result<()> {
    create_dir(out)?;
    let csv = format!("{}\n{}\n", MetricReport::csv_header(num_classes), report.csv_row(ratio, method));
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&out.join("metrics.json"), json.as_bytes())?;
    write_atomic(&out.join("summary.txt"), format!("{}\n", report.summary()).as_bytes())
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR)
}
