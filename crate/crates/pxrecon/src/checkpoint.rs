//! PXCK checkpoints: a JSON header followed by raw float32 blobs.
//!
//! ```text
//! "PXCK1"               5 bytes
//! header length         u64 LE
//! header                UTF-8 JSON (CheckpointHeader)
//! tensors               f32 LE per store entry, in header order
//! adam first moments    f32 LE per entry (when the header says so)
//! adam second moments   f32 LE per entry
//! ```

use std::path::Path;

use pxrecon_core::fusion::{JointConfig, JointTrainConfig, JointTrainer};
use pxrecon_core::nn::{Kind, Store};
use pxrecon_core::optim::Adam;
use pxrecon_core::pgr::{PgrConfig, PgrTrainConfig, PgrTrainer, WeightSchedule};
use pxrecon_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 5] = b"PXCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Pgr { model: PgrConfig, train: PgrTrainConfig },
    Joint { model: JointConfig, train: JointTrainConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

/// Batch order is a pure function of `(rng_seed, step)`, so these two fields
/// are the complete sampling state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub spec: ModelSpec,
    pub step: u64,
    pub rng_seed: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    pub adam: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Vec<f32>>,
    pub moments: Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>,
}

fn capture(spec: ModelSpec, step: u64, seed: u64, config_hash: &str, store: &Store<f32>, opt: &Adam<f32>) -> Checkpoint {
    let tensors = store
        .entries()
        .iter()
        .map(|e| TensorEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.kind == Kind::Param,
        })
        .collect();
    Checkpoint {
        header: CheckpointHeader {
            version: VERSION,
            spec,
            step,
            rng_seed: seed,
            config_hash: config_hash.into(),
            tensors,
            adam: Some(AdamState {
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                t: opt.t,
            }),
        },
        values: store.entries().iter().map(|e| e.value.data().to_vec()).collect(),
        moments: Some((opt.m.clone(), opt.v.clone())),
    }
}

/// Copies tensors and optimizer state into a freshly built store.
fn restore(ck: &Checkpoint, store: &mut Store<f32>, opt: &mut Adam<f32>, path: &Path) -> Result<()> {
    if store.len() != ck.header.tensors.len() {
        return Err(Error::format(
            path,
            "tensors",
            format!("{} entries, model has {}", ck.header.tensors.len(), store.len()),
        ));
    }
    for (t, v) in ck.header.tensors.iter().zip(&ck.values) {
        store.set(&t.name, Tensor::from_vec(&t.shape, v.clone())?)?;
    }
    if let (Some(a), Some((m, v))) = (&ck.header.adam, &ck.moments) {
        opt.beta1 = a.beta1;
        opt.beta2 = a.beta2;
        opt.eps = a.eps;
        opt.t = a.t;
        opt.m = m.clone();
        opt.v = v.clone();
    }
    Ok(())
}

impl Checkpoint {
    pub fn of_pgr(tr: &PgrTrainer, config_hash: &str) -> Self {
        let spec = ModelSpec::Pgr {
            model: tr.model.cfg,
            train: tr.cfg.clone(),
        };
        capture(spec, tr.step, tr.cfg.seed, config_hash, &tr.store, &tr.opt)
    }

    pub fn of_joint(tr: &JointTrainer, config_hash: &str) -> Self {
        let spec = ModelSpec::Joint {
            model: tr.model.cfg,
            train: tr.cfg.clone(),
        };
        capture(spec, tr.step, tr.cfg.seed, config_hash, &tr.store, &tr.opt)
    }

    pub fn pgr_trainer(&self, path: &Path) -> Result<PgrTrainer> {
        let ModelSpec::Pgr { model, train } = &self.header.spec else {
            return Err(Error::format(path, "kind", "not a reconstruction checkpoint"));
        };
        let mut tr = PgrTrainer::new(*model, train.clone())?;
        restore(self, &mut tr.store, &mut tr.opt, path)?;
        tr.weights = WeightSchedule::new(train.alpha);
        tr.step = self.header.step;
        Ok(tr)
    }

    pub fn joint_trainer(&self, path: &Path) -> Result<JointTrainer> {
        let ModelSpec::Joint { model, train } = &self.header.spec else {
            return Err(Error::format(path, "kind", "not a joint-model checkpoint"));
        };
        let mut tr = JointTrainer::new(*model, train.clone())?;
        restore(self, &mut tr.store, &mut tr.opt, path)?;
        tr.step = self.header.step;
        Ok(tr)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut blobs: Vec<&Vec<f32>> = self.values.iter().collect();
        if let Some((m, v)) = &self.moments {
            blobs.extend(m.iter().chain(v));
        }
        for b in blobs {
            for x in b {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(Error::format(path, "magic", "not a PXCK1 checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let body = bytes
            .get(13..13usize.saturating_add(hlen))
            .ok_or_else(|| Error::format(path, "header", "truncated"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::format(path, "header", e.to_string()))?;
        if header.version != VERSION {
            return Err(Error::format(path, "version", header.version.to_string()));
        }
        let mut rest = &bytes[13 + hlen..];
        let mut take = |n: usize| -> Result<Vec<f32>> {
            if rest.len() < n * 4 {
                return Err(Error::format(path, "payload", "truncated tensor data"));
            }
            let (a, b) = rest.split_at(n * 4);
            rest = b;
            Ok(a.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let sizes: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let values = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        let moments = match header.adam {
            Some(_) => {
                let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                Some((m, v))
            }
            None => None,
        };
        if !rest.is_empty() {
            return Err(Error::format(path, "payload", format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { header, values, moments })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode()?;
        fsutil::write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fsutil::read(path)?, path)
    }
}
