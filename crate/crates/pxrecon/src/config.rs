//! Experiment configuration, presets and hashing.

use pxrecon_core::autodiff::CmaMode;
use pxrecon_core::fusion::{JointConfig, JointTrainConfig, Task};
use pxrecon_core::geometry::ProjectionConfig;
use pxrecon_core::optim::LrSchedule;
use pxrecon_core::pgr::{AlphaSchedule, PgrConfig, PgrTrainConfig};
use pxrecon_core::phantom::PhantomConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "PX3D_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Dims {
    /// 128 x 256 images, 128 x 256 x 128 volumes.
    Full,
    /// Every axis divided by four.
    Desk,
}

impl Dims {
    pub fn phantom(self) -> PhantomConfig {
        match self {
            Dims::Full => PhantomConfig::full(),
            Dims::Desk => PhantomConfig::desk(),
        }
    }

    pub fn projection(self) -> ProjectionConfig {
        match self {
            Dims::Full => ProjectionConfig::default(),
            Dims::Desk => ProjectionConfig::desk(),
        }
    }

    pub fn pgr(self) -> PgrConfig {
        match self {
            Dims::Full => PgrConfig::full(),
            Dims::Desk => PgrConfig::desk(),
        }
    }

    pub fn joint(self, task: Task) -> JointConfig {
        match self {
            Dims::Full => JointConfig::full(task),
            Dims::Desk => JointConfig::desk(task),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentTask {
    Recon,
    Cls2,
    Cls5,
    Seg,
}

impl ExperimentTask {
    pub fn joint(self) -> Option<Task> {
        match self {
            ExperimentTask::Recon => None,
            ExperimentTask::Cls2 => Some(Task::Cls2),
            ExperimentTask::Cls5 => Some(Task::Cls5),
            ExperimentTask::Seg => Some(Task::Seg),
        }
    }
}

/// Where the joint model's volume input comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconSource {
    /// Ground-truth unfolded volumes from the manifest.
    Gt,
    /// Volumes predicted by a frozen reconstruction checkpoint.
    Checkpoint(String),
}

impl std::str::FromStr for ReconSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gt" => Ok(ReconSource::Gt),
            "" => Err("empty recon source".into()),
            path => Ok(ReconSource::Checkpoint(path.into())),
        }
    }
}

/// Everything needed to reproduce a run; written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: ExperimentTask,
    pub dims: Dims,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub tau: f64,
    pub lambda: f64,
    pub cma_mode: CmaMode,
    pub alpha: AlphaSchedule,
    pub recon: ReconSource,
    pub fusion: bool,
    pub checkpoint_every: u64,
}

impl ExperimentConfig {
    /// Training defaults for a task.
    pub fn new(task: ExperimentTask, dims: Dims) -> Self {
        let steps = match task {
            ExperimentTask::Recon => PgrTrainConfig::default().steps,
            _ => 200,
        };
        let (schedule, batch_size) = match task.joint() {
            None => (LrSchedule::reconstruction(), PgrTrainConfig::default().batch_size),
            Some(t) => {
                let c = JointTrainConfig::for_task(t, steps);
                (c.schedule, c.batch_size)
            }
        };
        let jt = JointTrainConfig::for_task(Task::Cls5, steps);
        ExperimentConfig {
            task,
            dims,
            seed: 0,
            steps,
            batch_size,
            schedule,
            tau: jt.tau,
            lambda: jt.lambda,
            cma_mode: jt.cma_mode,
            alpha: AlphaSchedule::Paper,
            recon: ReconSource::Gt,
            fusion: true,
            checkpoint_every: 1000,
        }
    }

    /// Applies the seed override from the environment, if set.
    pub fn with_env_seed(mut self) -> crate::Result<Self> {
        if let Some(seed) = env_seed()? {
            self.seed = seed;
        }
        Ok(self)
    }

    pub fn pgr_train(&self) -> PgrTrainConfig {
        PgrTrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            schedule: self.schedule.clone(),
            alpha: self.alpha,
            seed: self.seed,
        }
    }

    pub fn joint_train(&self) -> JointTrainConfig {
        JointTrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            schedule: self.schedule.clone(),
            tau: self.tau,
            lambda: self.lambda,
            cma_mode: self.cma_mode,
            seed: self.seed,
        }
    }

    pub fn joint_model(&self) -> Option<JointConfig> {
        self.task.joint().map(|t| JointConfig {
            fusion: self.fusion,
            ..self.dims.joint(t)
        })
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

pub fn env_seed() -> crate::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| crate::Error::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
