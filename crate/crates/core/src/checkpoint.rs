//! Checkpoint directories: `manifest.toml` plus one little-endian blob per tensor.
//!
//! Blobs hold the tensor's values in row-major order as IEEE-754 `f32` or
//! `f64`, little-endian, with no header; shape and dtype live in the
//! manifest. The manifest ends with a `checksum` line holding the SHA-256 of
//! everything before it, and every blob entry carries its own SHA-256.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::ThresholdState;
use crate::model::Segmenter;
use crate::nn::{ParamKind, ParamStore};
use crate::train::Trainer;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";
const CHECKSUM_KEY: &str = "checksum = ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Parameter kind, or `"momentum"` for optimizer buffers.
    pub kind: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub step: usize,
    pub total_steps: usize,
    pub tau: f64,
    pub config: String,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint, not yet bound to a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub total_steps: usize,
    pub tau: f64,
    pub params: Vec<(String, ParamKind, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tensor_bytes(t: &Tensor) -> Result<(String, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => ("f64".into(), flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            "f32".into(),
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

fn bytes_tensor(bytes: &[u8], dtype: &str, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let t = match dtype {
        "f64" if bytes.len() == 8 * n => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        "f32" if bytes.len() == 4 * n => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        _ => {
            return Err(Error::Checkpoint(format!(
                "blob of {} bytes does not hold {n} {dtype} values",
                bytes.len()
            )))
        }
    };
    Ok(t)
}

fn write_entry(dir: &Path, index: usize, name: &str, kind: &str, t: &Tensor) -> Result<TensorEntry> {
    let (dtype, bytes) = tensor_bytes(t)?;
    let file = format!("tensors/{index:05}.bin");
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(TensorEntry {
        name: name.to_string(),
        kind: kind.to_string(),
        dtype,
        shape: t.dims().to_vec(),
        file,
        sha256: sha256_hex(&bytes),
    })
}

/// Write parameters, buffers, optimizer state, threshold, step and config.
pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    save_parts(
        dir,
        &trainer.cfg,
        &trainer.model.store,
        trainer.optim.buffers(),
        trainer.step,
        trainer.total_steps,
        trainer.threshold.tau,
    )
}

fn save_parts<'a>(
    dir: &Path,
    cfg: &TrainConfig,
    store: &ParamStore,
    momentum: impl Iterator<Item = (&'a str, &'a Tensor)>,
    step: usize,
    total_steps: usize,
    tau: f64,
) -> Result<()> {
    let tensors_dir = dir.join("tensors");
    fs::create_dir_all(&tensors_dir).map_err(|e| Error::io(&tensors_dir, e))?;
    let mut entries = Vec::new();
    for (name, p) in store.iter() {
        entries.push(write_entry(dir, entries.len(), name, p.kind.as_str(), p.var.as_tensor())?);
    }
    for (name, t) in momentum {
        entries.push(write_entry(dir, entries.len(), name, "momentum", t)?);
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        step,
        total_steps,
        tau,
        config: cfg.to_toml_string()?,
        tensors: entries,
    };
    let body = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let text = format!("{body}{CHECKSUM_KEY}\"{}\"\n", sha256_hex(body.as_bytes()));
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let split = text
        .rfind(CHECKSUM_KEY)
        .ok_or_else(|| Error::Checkpoint("manifest has no checksum".into()))?;
    let (body, tail) = text.split_at(split);
    let stored = tail[CHECKSUM_KEY.len()..].trim().trim_matches('"');
    if stored != sha256_hex(body.as_bytes()) {
        return Err(Error::Checkpoint(format!("manifest checksum mismatch in {}", path.display())));
    }
    let manifest: Manifest = toml::from_str(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    let config = TrainConfig::from_toml_str(&manifest.config)?;
    let mut params = Vec::new();
    let mut momentum = Vec::new();
    for e in &manifest.tensors {
        let p = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Checkpoint(format!("tensor {} failed its content hash", e.name)));
        }
        let t = bytes_tensor(&bytes, &e.dtype, &e.shape)?;
        if e.kind == "momentum" {
            momentum.push((e.name.clone(), t));
        } else {
            let kind = ParamKind::parse(&e.kind)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor kind {:?}", e.kind)))?;
            params.push((e.name.clone(), kind, t));
        }
    }
    Ok(Checkpoint {
        config,
        step: manifest.step,
        total_steps: manifest.total_steps,
        tau: manifest.tau,
        params,
        momentum,
    })
}

/// Copy checkpoint values into a freshly built store with the same layout.
pub fn restore_params(store: &ParamStore, ckpt: &Checkpoint) -> Result<()> {
    if store.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} tensors, checkpoint {}",
            store.len(),
            ckpt.params.len()
        )));
    }
    for (name, kind, t) in &ckpt.params {
        let p = store
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint tensor {name} has no counterpart")))?;
        if p.kind != *kind || p.var.dims() != t.dims() {
            return Err(Error::Checkpoint(format!("tensor {name} differs in kind or shape")));
        }
        p.var.set(&t.to_dtype(store.dtype())?.to_device(store.device())?)?;
    }
    Ok(())
}

/// Rebuild a model for inference.
pub fn load_model(dir: &Path, device: &Device) -> Result<(Segmenter, TrainConfig)> {
    let ckpt = load_checkpoint(dir)?;
    let model = Segmenter::new(&ckpt.config, device)?;
    restore_params(&model.store, &ckpt)?;
    Ok((model, ckpt.config))
}

/// Rebuild a trainer that continues exactly where the checkpoint stopped.
pub fn resume_trainer(dir: &Path, labeled: Vec<Sample>, unlabeled: Vec<Sample>, device: &Device) -> Result<Trainer> {
    let ckpt = load_checkpoint(dir)?;
    let mut trainer = Trainer::new(ckpt.config.clone(), labeled, unlabeled, device)?;
    if trainer.total_steps != ckpt.total_steps {
        return Err(Error::Checkpoint(format!(
            "data gives {} total steps but the checkpoint was trained for {}",
            trainer.total_steps, ckpt.total_steps
        )));
    }
    restore_params(&trainer.model.store, &ckpt)?;
    let dtype = trainer.model.store.dtype();
    for (name, t) in &ckpt.momentum {
        trainer.optim.set_buffer(name, t.to_dtype(dtype)?.to_device(device)?);
    }
    trainer.step = ckpt.step;
    trainer.threshold = ThresholdState {
        tau: ckpt.tau,
        ..ThresholdState::new(&ckpt.config.pseudo)
    };
    Ok(trainer)
}
