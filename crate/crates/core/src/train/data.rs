//! Deterministic synthetic tasks and their reference oracles.
//!
//! Sample `i` of a task is drawn from its own ChaCha8 stream `i` under the task
//! seed, so any index range can be generated independently and in parallel.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::par::Execution;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Freq1D,
    Pattern2D,
    MultiLabel,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Freq1D => "freq1d",
            TaskKind::Pattern2D => "pattern2d",
            TaskKind::MultiLabel => "multilabel",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq1d" => Ok(TaskKind::Freq1D),
            "pattern2d" => Ok(TaskKind::Pattern2D),
            "multilabel" => Ok(TaskKind::MultiLabel),
            _ => Err(Error::Config(format!("unknown task `{s}` (freq1d, pattern2d, multilabel)"))),
        }
    }
}

/// A synthetic task. `snr` is the signal-to-noise power ratio; infinity means noiseless.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    /// One sinusoid per class at frequency `base_freq·(c+1)` cycles per sample,
    /// random phase, unit amplitude. Input `[length, 1]`.
    Freq1D {
        classes: usize,
        length: usize,
        snr: f64,
        base_freq: f64,
    },
    /// Plane-wave grating at orientation `π c / classes`, random phase. Input `[h, w, 1]`.
    Pattern2D {
        classes: usize,
        h: usize,
        w: usize,
        snr: f64,
        freq: f64,
    },
    /// Sequence of `length / motif_len` slots. Each sample activates between 1
    /// and `labels_per_sample` distinct labels and plants each active motif in
    /// one slot; every other slot holds a random active motif with probability
    /// `fill` and background symbols from `0..background` otherwise. Each motif
    /// owns `motif_len` symbols above the background range, so label `c` is on
    /// iff motif `c` occurs. Input is one-hot `[length, vocab]` with
    /// `vocab = background + labels·motif_len`.
    MultiLabelBag {
        labels: usize,
        length: usize,
        background: usize,
        motif_len: usize,
        labels_per_sample: usize,
        fill: f64,
    },
}

impl TaskSpec {
    pub fn freq1d(classes: usize, length: usize, snr: f64) -> Self {
        TaskSpec::Freq1D {
            classes,
            length,
            snr,
            base_freq: 0.03,
        }
    }

    pub fn pattern2d(classes: usize, h: usize, w: usize, snr: f64) -> Self {
        TaskSpec::Pattern2D {
            classes,
            h,
            w,
            snr,
            freq: 0.125,
        }
    }

    pub fn multilabel(labels: usize, length: usize) -> Self {
        TaskSpec::MultiLabelBag {
            labels,
            length,
            background: 16,
            motif_len: 3,
            labels_per_sample: 3,
            fill: 0.5,
        }
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Freq1D => Self::freq1d(6, 3750, 1.0),
            TaskKind::Pattern2D => Self::pattern2d(4, 32, 32, 1.0),
            TaskKind::MultiLabel => Self::multilabel(20, 128),
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Freq1D { .. } => TaskKind::Freq1D,
            TaskSpec::Pattern2D { .. } => TaskKind::Pattern2D,
            TaskSpec::MultiLabelBag { .. } => TaskKind::MultiLabel,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            TaskSpec::Freq1D { classes, .. } | TaskSpec::Pattern2D { classes, .. } => classes,
            TaskSpec::MultiLabelBag { labels, .. } => labels,
        }
    }

    pub fn multilabel_task(&self) -> bool {
        self.kind() == TaskKind::MultiLabel
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            TaskSpec::Freq1D { length, .. } => vec![length, 1],
            TaskSpec::Pattern2D { h, w, .. } => vec![h, w, 1],
            TaskSpec::MultiLabelBag { length, .. } => vec![length, self.vocab()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            TaskSpec::Freq1D { classes, length, snr, base_freq } => {
                if classes < 2 || length == 0 || !(snr > 0.0) {
                    return bad(format!("freq1d needs classes ≥ 2, length ≥ 1, snr > 0 (got {classes}, {length}, {snr})"));
                }
                if base_freq * classes as f64 >= 0.5 {
                    return bad(format!("freq1d top frequency {} reaches Nyquist", base_freq * classes as f64));
                }
            }
            TaskSpec::Pattern2D { classes, h, w, snr, .. } => {
                if classes < 2 || h == 0 || w == 0 || !(snr > 0.0) {
                    return bad(format!("pattern2d needs classes ≥ 2, a nonempty grid, snr > 0 (got {classes}, {h}x{w}, {snr})"));
                }
            }
            TaskSpec::MultiLabelBag { labels, length, background, motif_len, labels_per_sample, fill } => {
                if labels < 2 || background == 0 || motif_len == 0 {
                    return bad("multilabel needs labels ≥ 2, background ≥ 1, motif_len ≥ 1".into());
                }
                if !(1..=labels).contains(&labels_per_sample) {
                    return bad(format!("labels_per_sample must lie in 1..={labels}, got {labels_per_sample}"));
                }
                if labels_per_sample > length / motif_len {
                    return bad(format!("{labels_per_sample} motifs of length {motif_len} do not fit in {length} symbols"));
                }
                if !(0.0..=1.0).contains(&fill) {
                    return bad(format!("fill must lie in [0, 1], got {fill}"));
                }
            }
        }
        Ok(())
    }

    /// Reads `task.*` keys, defaulting every absent key from [`Self::default_for`].
    pub fn from_manifest(kind: TaskKind, m: &Manifest) -> Result<Self> {
        let spec = match Self::default_for(kind) {
            TaskSpec::Freq1D { classes, length, snr, base_freq } => TaskSpec::Freq1D {
                classes: m.get_or("task.classes", classes)?,
                length: m.get_or("task.length", length)?,
                snr: m.get_or("task.snr", snr)?,
                base_freq: m.get_or("task.base_freq", base_freq)?,
            },
            TaskSpec::Pattern2D { classes, h, w, snr, freq } => TaskSpec::Pattern2D {
                classes: m.get_or("task.classes", classes)?,
                h: m.get_or("task.h", h)?,
                w: m.get_or("task.w", w)?,
                snr: m.get_or("task.snr", snr)?,
                freq: m.get_or("task.freq", freq)?,
            },
            TaskSpec::MultiLabelBag { labels, length, background, motif_len, labels_per_sample, fill } => TaskSpec::MultiLabelBag {
                labels: m.get_or("task.classes", labels)?,
                length: m.get_or("task.length", length)?,
                background: m.get_or("task.background", background)?,
                motif_len: m.get_or("task.motif_len", motif_len)?,
                labels_per_sample: m.get_or("task.labels_per_sample", labels_per_sample)?,
                fill: m.get_or("task.fill", fill)?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn write_manifest(&self, m: &mut Manifest) {
        m.set("task", self.kind());
        match *self {
            TaskSpec::Freq1D { classes, length, snr, base_freq } => {
                m.set("task.classes", classes);
                m.set("task.length", length);
                m.set("task.snr", snr);
                m.set("task.base_freq", base_freq);
            }
            TaskSpec::Pattern2D { classes, h, w, snr, freq } => {
                m.set("task.classes", classes);
                m.set("task.h", h);
                m.set("task.w", w);
                m.set("task.snr", snr);
                m.set("task.freq", freq);
            }
            TaskSpec::MultiLabelBag { labels, length, background, motif_len, labels_per_sample, fill } => {
                m.set("task.classes", labels);
                m.set("task.length", length);
                m.set("task.background", background);
                m.set("task.motif_len", motif_len);
                m.set("task.labels_per_sample", labels_per_sample);
                m.set("task.fill", fill);
            }
        }
    }

    /// One-hot width of a multilabel input; 0 for other tasks.
    pub fn vocab(&self) -> usize {
        match *self {
            TaskSpec::MultiLabelBag { labels, background, motif_len, .. } => background + labels * motif_len,
            _ => 0,
        }
    }

    /// Motif `c`: the `motif_len` consecutive symbols starting at `background + c·motif_len`.
    pub fn motif(&self, c: usize) -> Vec<usize> {
        let TaskSpec::MultiLabelBag { background, motif_len, .. } = *self else {
            return Vec::new();
        };
        (0..motif_len).map(|j| background + c * motif_len + j).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single(Vec<usize>),
    Multi(Vec<Vec<bool>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub inputs: Vec<Tensor<f64>>,
    pub labels: Labels,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

enum Sample {
    Single(Tensor<f64>, usize),
    Multi(Tensor<f64>, Vec<bool>),
}

fn noise_std(snr: f64, signal_power: f64) -> f64 {
    if snr.is_infinite() {
        0.0
    } else {
        (signal_power / snr).sqrt()
    }
}

fn sample(spec: &TaskSpec, seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    match *spec {
        TaskSpec::Freq1D { classes, length, snr, base_freq } => {
            let c = rng.random_range(0..classes);
            let f = base_freq * (c + 1) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let noise = Normal::new(0.0, noise_std(snr, 0.5)).expect("finite std");
            let x = (0..length)
                .map(|t| (2.0 * PI * f * t as f64 + phase).sin() + noise.sample(&mut rng))
                .collect();
            Sample::Single(Tensor::new(&[length, 1], x).expect("shape"), c)
        }
        TaskSpec::Pattern2D { classes, h, w, snr, freq } => {
            let c = rng.random_range(0..classes);
            let theta = PI * c as f64 / classes as f64;
            let (ky, kx) = (freq * theta.sin(), freq * theta.cos());
            let phase = rng.random_range(0.0..2.0 * PI);
            let noise = Normal::new(0.0, noise_std(snr, 0.5)).expect("finite std");
            let x = (0..h * w)
                .map(|i| {
                    let (y, xx) = ((i / w) as f64, (i % w) as f64);
                    (2.0 * PI * (ky * y + kx * xx) + phase).sin() + noise.sample(&mut rng)
                })
                .collect();
            Sample::Single(Tensor::new(&[h, w, 1], x).expect("shape"), c)
        }
        TaskSpec::MultiLabelBag { labels, length, background, motif_len, labels_per_sample, fill } => {
            let vocab = spec.vocab();
            let mut seq: Vec<usize> = (0..length).map(|_| rng.random_range(0..background)).collect();
            let slots = length / motif_len;
            let k = rng.random_range(1..=labels_per_sample);
            let active = index::sample(&mut rng, labels, k).into_vec();
            let planted = index::sample(&mut rng, slots, k).into_vec();
            for slot in 0..slots {
                let c = match planted.iter().position(|&p| p == slot) {
                    Some(j) => active[j],
                    None if rng.random_bool(fill) => active[rng.random_range(0..k)],
                    None => continue,
                };
                seq[slot * motif_len..(slot + 1) * motif_len].copy_from_slice(&spec.motif(c));
            }
            let y = scan_motifs(spec, &seq);
            let mut x = vec![0.0; length * vocab];
            for (t, &s) in seq.iter().enumerate() {
                x[t * vocab + s] = 1.0;
            }
            Sample::Multi(Tensor::new(&[length, vocab], x).expect("shape"), y)
        }
    }
}

/// Samples `offset .. offset + n` of the task under `seed`.
pub fn generate(spec: &TaskSpec, seed: u64, offset: usize, n: usize, exec: Execution) -> Result<Dataset> {
    spec.validate()?;
    let samples = exec.map_range(n, |i| sample(spec, seed, (offset + i) as u64));
    let mut inputs = Vec::with_capacity(n);
    let labels = if spec.multilabel_task() {
        let mut ys = Vec::with_capacity(n);
        for s in samples {
            if let Sample::Multi(x, y) = s {
                inputs.push(x);
                ys.push(y);
            }
        }
        Labels::Multi(ys)
    } else {
        let mut ys = Vec::with_capacity(n);
        for s in samples {
            if let Sample::Single(x, y) = s {
                inputs.push(x);
                ys.push(y);
            }
        }
        Labels::Single(ys)
    };
    Ok(Dataset {
        spec: spec.clone(),
        inputs,
        labels,
    })
}

/// A train split `0..n_train` and a disjoint test split after it.
pub fn split(spec: &TaskSpec, seed: u64, n_train: usize, n_test: usize, exec: Execution) -> Result<(Dataset, Dataset)> {
    Ok((generate(spec, seed, 0, n_train, exec)?, generate(spec, seed, n_train, n_test, exec)?))
}

/// Decodes a one-hot `[length, vocab]` input back to symbols.
pub fn decode_symbols(x: &Tensor<f64>) -> Vec<usize> {
    let vocab = x.shape()[1];
    x.data().chunks(vocab).map(|row| row.iter().position(|&v| v == 1.0).unwrap_or(0)).collect()
}

/// Label `c` is on iff motif `c` appears as a contiguous run anywhere in `seq`.
pub fn scan_motifs(spec: &TaskSpec, seq: &[usize]) -> Vec<bool> {
    (0..spec.num_classes())
        .map(|c| {
            let m = spec.motif(c);
            !m.is_empty() && seq.windows(m.len()).any(|w| w == m.as_slice())
        })
        .collect()
}

/// Class with the most energy at its own frequency (1D) or wave vector (2D).
pub fn frequency_oracle(spec: &TaskSpec, x: &Tensor<f64>) -> usize {
    let energies: Vec<f64> = match *spec {
        TaskSpec::Freq1D { classes, base_freq, .. } => (0..classes)
            .map(|c| {
                let f = base_freq * (c + 1) as f64;
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.data().iter().enumerate() {
                    let a = 2.0 * PI * f * t as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect(),
        TaskSpec::Pattern2D { classes, w, freq, .. } => (0..classes)
            .map(|c| {
                let theta = PI * c as f64 / classes as f64;
                let (ky, kx) = (freq * theta.sin(), freq * theta.cos());
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &v) in x.data().iter().enumerate() {
                    let a = 2.0 * PI * (ky * (i / w) as f64 + kx * (i % w) as f64);
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect(),
        TaskSpec::MultiLabelBag { .. } => return 0,
    };
    super::metrics::argmax(&energies)
}
