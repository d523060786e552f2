//! One manifest describing a model, a synthetic task and a training run.
//!
//! Encoder keys are read as by [`EncoderConfig::from_manifest`], training keys
//! under `train.*`, task keys under `task.*`. `num_classes` and `multilabel`
//! default to the task's values and must agree with them when given.

use crate::encoder::{checkpoint, EncoderConfig, MANIFEST_KEYS};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::train::{TaskKind, TaskSpec, TrainConfig, TRAIN_KEYS};

/// Task keys accepted under `task.*`.
pub const TASK_KEYS: &[&str] = &[
    "task",
    "task.classes",
    "task.length",
    "task.snr",
    "task.base_freq",
    "task.h",
    "task.w",
    "task.freq",
    "task.background",
    "task.motif_len",
    "task.labels_per_sample",
    "task.fill",
];

/// Independent seeds for the separate uses of one user seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const SEED_MODEL: u64 = 1;
pub const SEED_DATA: u64 = 2;
pub const SEED_SHUFFLE: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub encoder: EncoderConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

fn check_task_key(m: &Manifest, kind: TaskKind) -> Result<()> {
    match m.get("task") {
        Some(name) if name.parse::<TaskKind>()? != kind => Err(Error::Config(format!(
            "manifest is for task `{name}`, requested `{kind}`"
        ))),
        _ => Ok(()),
    }
}

impl Experiment {
    pub fn from_manifest(m: &Manifest, kind: TaskKind) -> Result<Self> {
        let unknown = m.unknown_keys(&[MANIFEST_KEYS, TRAIN_KEYS, TASK_KEYS].concat(), &[]);
        if let Some(k) = unknown.first() {
            return Err(Error::Config(format!("unknown manifest key `{k}`")));
        }
        check_task_key(m, kind)?;
        let task = TaskSpec::from_manifest(kind, m)?;
        let mut filled = m.clone();
        for (key, value) in [
            ("num_classes", task.num_classes().to_string()),
            ("multilabel", task.multilabel_task().to_string()),
        ] {
            match m.get(key) {
                None => filled.set(key, value),
                Some(v) if v == value => {}
                Some(v) => {
                    return Err(Error::Config(format!("`{key} = {v}` contradicts the task ({value})")));
                }
            }
        }
        let encoder = EncoderConfig::from_manifest(&filled)?;
        let (want, got) = (task.input_shape(), encoder.stem.input_shape());
        if want != got {
            return Err(Error::Config(format!("stem expects input {got:?}, task produces {want:?}")));
        }
        let train = TrainConfig::from_manifest(kind, m)?;
        Ok(Experiment { encoder, task, train })
    }

    /// Reconstructs the run recorded in a checkpoint manifest.
    pub fn from_checkpoint(m: &Manifest, kind: TaskKind) -> Result<Self> {
        let mut clean = Manifest::new();
        let known = checkpoint::known_keys();
        for k in m.keys() {
            if known.contains(&k) && !matches!(k, "format" | "dtype" | "param_count") || TRAIN_KEYS.contains(&k) || TASK_KEYS.contains(&k) {
                clean.set(k, m.get(k).unwrap_or_default());
            }
        }
        Self::from_manifest(&clean, kind)
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = self.encoder.to_manifest();
        self.task.write_manifest(&mut m);
        self.train.write_manifest(&mut m);
        m
    }

    /// Applies a user seed to every consumer of randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.train.seed, SEED_MODEL)
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.train.seed, SEED_DATA)
    }
}
