//! Phantom datasets on disk: PNG16 panoramics, RVOL volumes and a JSONL
//! manifest with one record per sample.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use pxrecon_core::geometry::{build_samples, MisalignmentLabel};
use pxrecon_core::phantom::generate_phantom;
use pxrecon_core::volume::{Image, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Dims;
use crate::error::{Error, Result};
use crate::png16::{read_png16, write_png16, Sidecar};
use crate::rvol::{read_volume, write_volume};
use crate::fsutil;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub px: String,
    pub unfolded: String,
    pub class_id: usize,
    pub binary_label: usize,
    pub label: MisalignmentLabel,
    pub degrees: f64,
    pub lesion_mask: Option<String>,
    pub source_phantom_id: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn save(&self) -> Result<()> {
        fsutil::write_atomic(&self.root.join(MANIFEST), &self.to_jsonl()?)
    }

    /// Reads and validates a manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let text = String::from_utf8(fsutil::read(&path)?).map_err(|e| Error::format(&path, "utf-8", e.to_string()))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: Record =
                serde_json::from_str(line).map_err(|e| Error::format(&path, "record", format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest { root, records };
        m.validate(&path)?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::format(path, "records", "manifest is empty"));
        }
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(&r.id) {
                return Err(Error::format(path, "id", format!("duplicate id {}", r.id)));
            }
            if r.class_id >= MisalignmentLabel::ALL.len() || r.class_id != r.label.class_id() {
                return Err(Error::format(path, "class_id", format!("{}: class {} label {:?}", r.id, r.class_id, r.label)));
            }
            if r.binary_label != r.label.binary() {
                return Err(Error::format(path, "binary_label", format!("{}: {}", r.id, r.binary_label)));
            }
            for p in [Some(&r.px), Some(&r.unfolded), r.lesion_mask.as_ref()].into_iter().flatten() {
                if !self.root.join(p).is_file() {
                    return Err(Error::format(path, "path", format!("{}: {p} does not exist", r.id)));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// One sample read back from disk.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub record: Record,
    pub px: Image,
    pub unfolded: Volume,
    pub mask: Option<Image>,
}

pub fn load_records(m: &Manifest, records: &[&Record]) -> Result<Vec<Loaded>> {
    records
        .iter()
        .map(|r| {
            Ok(Loaded {
                record: (*r).clone(),
                px: read_png16(&m.root.join(&r.px))?,
                unfolded: read_volume(&m.root.join(&r.unfolded))?,
                mask: r.lesion_mask.as_ref().map(|p| read_png16(&m.root.join(p))).transpose()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    pub dims: Dims,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub lesion_probability: Option<f64>,
}

impl GenConfig {
    pub fn new(count: usize, seed: u64, dims: Dims) -> Self {
        GenConfig {
            count,
            seed,
            dims,
            val_fraction: 0.1,
            test_fraction: 0.2,
            lesion_probability: None,
        }
    }

    /// Phantom seeds (`seed + i`) and the split of each phantom (splits are
    /// per phantom so no phantom contributes to two splits).
    pub fn plan(&self) -> Result<Vec<(u64, Split)>> {
        if self.count == 0 {
            return Err(Error::Invalid("count must be at least 1".into()));
        }
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.val_fraction) || !ok(self.test_fraction) || self.val_fraction + self.test_fraction > 1.0 {
            return Err(Error::Invalid("split fractions must be in [0,1] and sum to at most 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let seeds: Vec<u64> = (0..self.count as u64).map(|i| self.seed.wrapping_add(i)).collect();
        let n_test = (self.test_fraction * self.count as f64).round() as usize;
        let n_val = ((self.val_fraction * self.count as f64).round() as usize).min(self.count - n_test);
        let mut order: Vec<usize> = (0..self.count).collect();
        order.shuffle(&mut rng);
        let mut splits = vec![Split::Train; self.count];
        for (k, &i) in order.iter().enumerate() {
            if k < n_test {
                splits[i] = Split::Test;
            } else if k < n_test + n_val {
                splits[i] = Split::Val;
            }
        }
        Ok(seeds.into_iter().zip(splits).collect())
    }
}

fn sample_id(phantom: usize, label: MisalignmentLabel, degrees: f64) -> String {
    format!("p{phantom:05}-{}{:+}", label.as_str(), degrees.round() as i64)
}

/// Writes `count` phantoms (seven samples each) and their manifest.
pub fn generate_dataset(out: &Path, cfg: &GenConfig) -> Result<Manifest> {
    let proj = cfg.dims.projection();
    let mut records = Vec::new();
    for (i, (seed, split)) in cfg.plan()?.into_iter().enumerate() {
        let mut pc = cfg.dims.phantom().with_seed(seed);
        if let Some(p) = cfg.lesion_probability {
            pc.lesion_probability = p;
        }
        let phantom = generate_phantom(&pc)?;
        for s in build_samples(&phantom, &proj)? {
            let id = sample_id(i, s.label, s.degrees);
            let px = format!("px/{id}.png");
            let unfolded = format!("vol/{id}.rvol");
            let mut side = Sidecar::for_image(&s.px);
            side.label = Some(s.label.as_str().into());
            side.degrees = Some(s.degrees);
            side.source_phantom_id = Some(seed);
            write_png16(&s.px, &out.join(&px), &side)?;
            write_volume(&s.unfolded, &out.join(&unfolded))?;
            let lesion_mask = match &s.lesion_mask_2d {
                Some(m) => {
                    let p = format!("mask/{id}.png");
                    write_png16(m, &out.join(&p), &Sidecar::for_image(m))?;
                    Some(p)
                }
                None => None,
            };
            records.push(Record {
                id,
                px,
                unfolded,
                class_id: s.class_id(),
                binary_label: s.binary_label(),
                label: s.label,
                degrees: s.degrees,
                lesion_mask,
                source_phantom_id: seed,
                split,
            });
        }
    }
    let m = Manifest {
        root: out.to_path_buf(),
        records,
    };
    m.save()?;
    fsutil::write_json(&out.join("config.json"), cfg)?;
    Ok(m)
}
