//! Optimization, losses, metrics, synthetic tasks and the train/eval loops.

pub mod data;
pub mod loss;
pub mod metrics;
pub mod optim;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::{frequency_oracle, generate, split, Dataset, Labels, TaskKind, TaskSpec};
pub use loss::{cross_entropy_ls, weighted_bce};
pub use metrics::{metrics_multilabel, Metrics};
pub use optim::{cosine_warmup_lr, AdamW, AdamWConfig};

use crate::autodiff::Graph;
use crate::encoder::{checkpoint, Model};
use crate::error::{Error, Result};
use crate::experiment::{derive_seed, SEED_SHUFFLE};
use crate::manifest::Manifest;
use crate::par::Execution;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    WeightedBce { alpha: f64 },
}

/// Every key read by [`TrainConfig::from_manifest`].
pub const TRAIN_KEYS: &[&str] = &[
    "train.lr_peak",
    "train.warmup_epochs",
    "train.epochs",
    "train.beta1",
    "train.beta2",
    "train.weight_decay",
    "train.batch_size",
    "train.label_smoothing",
    "train.loss",
    "train.bce_alpha",
    "train.seed",
    "train.n_train",
    "train.n_test",
    "train.target",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Stop once the held-out primary metric reaches this value.
    pub target: Option<f64>,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 1e-3,
            warmup_epochs: 3,
            total_epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            batch_size: 32,
            label_smoothing: 0.1,
            loss: LossKind::CrossEntropy,
            seed: 0,
            n_train: 2000,
            n_test: 500,
            target: None,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults suited to the task: cross-entropy with smoothing for single-label
    /// tasks, weighted BCE with `alpha = 0.5` for multi-label ones.
    pub fn for_task(kind: TaskKind) -> Self {
        let mut c = TrainConfig::default();
        if kind == TaskKind::MultiLabel {
            c.loss = LossKind::WeightedBce { alpha: 0.5 };
            c.label_smoothing = 0.0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} {b} outside (0, 1)"));
            }
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return fail(format!(
                "need warmup_epochs < epochs (got {} and {})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.batch_size == 0 || self.n_train == 0 {
            return fail("batch_size and n_train must be positive".into());
        }
        if !(self.lr_peak >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr_peak and weight_decay must be non-negative".into());
        }
        if let LossKind::WeightedBce { alpha } = self.loss {
            if !(0.0..=1.0).contains(&alpha) {
                return fail(format!("bce_alpha {alpha} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn from_manifest(kind: TaskKind, m: &Manifest) -> Result<Self> {
        let d = Self::for_task(kind);
        let default_loss = match d.loss {
            LossKind::CrossEntropy => "ce",
            LossKind::WeightedBce { .. } => "wbce",
        };
        let loss = match m.get_or("train.loss", default_loss.to_string())?.as_str() {
            "ce" => LossKind::CrossEntropy,
            "wbce" => LossKind::WeightedBce {
                alpha: m.get_or("train.bce_alpha", 0.5)?,
            },
            other => return Err(Error::Config(format!("train.loss `{other}` (ce, wbce)"))),
        };
        let target = match m.get("train.target") {
            None | Some("none") => None,
            Some(_) => Some(m.require("train.target")?),
        };
        let c = TrainConfig {
            lr_peak: m.get_or("train.lr_peak", d.lr_peak)?,
            warmup_epochs: m.get_or("train.warmup_epochs", d.warmup_epochs)?,
            total_epochs: m.get_or("train.epochs", d.total_epochs)?,
            beta1: m.get_or("train.beta1", d.beta1)?,
            beta2: m.get_or("train.beta2", d.beta2)?,
            weight_decay: m.get_or("train.weight_decay", d.weight_decay)?,
            batch_size: m.get_or("train.batch_size", d.batch_size)?,
            label_smoothing: m.get_or("train.label_smoothing", d.label_smoothing)?,
            loss,
            seed: m.get_or("train.seed", d.seed)?,
            n_train: m.get_or("train.n_train", d.n_train)?,
            n_test: m.get_or("train.n_test", d.n_test)?,
            target,
            exec: d.exec,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn write_manifest(&self, m: &mut Manifest) {
        m.set("train.lr_peak", self.lr_peak);
        m.set("train.warmup_epochs", self.warmup_epochs);
        m.set("train.epochs", self.total_epochs);
        m.set("train.beta1", self.beta1);
        m.set("train.beta2", self.beta2);
        m.set("train.weight_decay", self.weight_decay);
        m.set("train.batch_size", self.batch_size);
        m.set("train.label_smoothing", self.label_smoothing);
        match self.loss {
            LossKind::CrossEntropy => m.set("train.loss", "ce"),
            LossKind::WeightedBce { alpha } => {
                m.set("train.loss", "wbce");
                m.set("train.bce_alpha", alpha);
            }
        }
        m.set("train.seed", self.seed);
        m.set("train.n_train", self.n_train);
        m.set("train.n_test", self.n_test);
        m.set("train.target", self.target.map_or("none".to_string(), |t| t.to_string()));
    }

    /// Learning rate at `progress ∈ [0, 1]` of the full epoch budget.
    pub fn lr_at(&self, progress: f64) -> f64 {
        cosine_warmup_lr(progress, self.warmup_epochs as f64 / self.total_epochs as f64, self.lr_peak)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub test: Option<Metrics>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub stopped_early: bool,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Metric used for early stopping: top-1 for single-label tasks, EBF otherwise.
pub fn primary(m: &Metrics, multilabel: bool) -> f64 {
    if multilabel {
        m.ebf
    } else {
        m.top1
    }
}

fn sample_loss<T: Scalar>(model: &Model<T>, data: &Dataset, i: usize, cfg: &TrainConfig) -> Result<(f64, Vec<Tensor<T>>)> {
    let g = Graph::<T>::new();
    let p = model.bind(&g);
    let x = g.constant(data.inputs[i].cast());
    let logits = model.forward(&p, x)?;
    let loss = match (&data.labels, cfg.loss) {
        (Labels::Single(y), LossKind::CrossEntropy) => cross_entropy_ls(logits, &[y[i]], cfg.label_smoothing)?,
        (Labels::Multi(y), LossKind::WeightedBce { alpha }) => {
            let t = Tensor::from_fn(&[1, y[i].len()], |j| if y[i][j] { T::one() } else { T::zero() });
            weighted_bce(logits, &t, alpha)?
        }
        _ => return Err(Error::Config("loss kind does not match the task's label type".into())),
    };
    let value = loss.value().data()[0].as_f64();
    let mut grads = g.backward(loss)?;
    Ok((value, p.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Mean loss and gradient over `batch`. Per-sample results are summed in batch
/// order, so the outcome does not depend on the execution mode. Both losses
/// are means of per-sample terms (the weighted BCE because every example
/// carries the same label count), so splitting by sample is exact.
fn batch_gradient<T: Scalar>(model: &Model<T>, data: &Dataset, batch: &[usize], cfg: &TrainConfig) -> Result<(f64, Vec<Tensor<T>>)> {
    let parts = cfg.exec.map(batch, |_, &i| sample_loss(model, data, i, cfg));
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<T>>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    let mut grads = total.unwrap_or_default();
    let inv = T::cast_from(1.0 / batch.len() as f64);
    for g in &mut grads {
        g.scale_in_place(inv);
    }
    Ok((loss / batch.len() as f64, grads))
}

/// Mini-batch AdamW training with a warmup-cosine schedule.
///
/// Examples are shuffled each epoch from `cfg.seed`. With `test`, metrics are
/// recorded after every epoch and training stops early once `cfg.target` is
/// met. With `out`, the final model is saved there; if a loss turns non-finite
/// the model from before that step is saved instead and
/// [`Error::NonFiniteLoss`] is returned.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<History> {
    train_with(model, data, test, cfg, out, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let multilabel = data.spec.multilabel_task();
    if multilabel != model.config().multilabel || data.spec.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "task has {} {} labels, model expects {} {}",
            data.spec.num_classes(),
            if multilabel { "multi" } else { "single" },
            model.config().num_classes,
            if model.config().multilabel { "multi" } else { "single" },
        )));
    }
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_SHUFFLE));
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.total_epochs) as f64;
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.total_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            // a NaN caught inside the forward pass counts as a non-finite loss
            let (loss, grads) = match batch_gradient(model, data, batch, cfg) {
                Err(Error::NaN(_) | Error::Numeric(_)) => (f64::NAN, Vec::new()),
                r => r?,
            };
            if !loss.is_finite() {
                if let Some(dir) = out {
                    save_with_history(model, dir, cfg, data, &history)?;
                }
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss * batch.len() as f64;
            lr = cfg.lr_at((epoch * steps_per_epoch + step + 1) as f64 / total_steps);
            opt.step(model.params_mut(), &grads, lr)?;
        }
        let metrics = test.map(|t| evaluate(model, t, cfg.exec)).transpose()?;
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            lr,
            test: metrics,
            seconds: start.elapsed().as_secs_f64(),
        });
        on_epoch(history.epochs.last().expect("just pushed"));
        if let (Some(m), Some(target)) = (metrics, cfg.target) {
            if primary(&m, multilabel) >= target {
                history.stopped_early = epoch + 1 < cfg.total_epochs;
                break;
            }
        }
    }
    history.steps = opt.steps();
    if let Some(dir) = out {
        save_with_history(model, dir, cfg, data, &history)?;
    }
    Ok(history)
}

fn save_with_history<T: Scalar>(model: &Model<T>, dir: &Path, cfg: &TrainConfig, data: &Dataset, h: &History) -> Result<()> {
    let mut extra = Manifest::new();
    data.spec.write_manifest(&mut extra);
    cfg.write_manifest(&mut extra);
    extra.set("history.epochs", h.epochs.len());
    if let Some(last) = h.last() {
        extra.set("history.loss", last.loss);
        if let Some(m) = last.test {
            extra.set("history.top1", m.top1);
            extra.set("history.ebf", m.ebf);
            extra.set("history.mif", m.mif);
        }
    }
    checkpoint::save(model, dir, &extra)
}

/// Logits for every input, without recording gradients.
pub fn predict<T: Scalar>(model: &Model<T>, data: &Dataset, exec: Execution) -> Result<Vec<Vec<f64>>> {
    exec.map(&data.inputs, |_, x| model.logits(&x.cast()).map(|l| l.to_f64_vec()))
        .into_iter()
        .collect()
}

/// Top-1 for single-label data; top-1, EBF and MiF at threshold 0.5 for multi-label data.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, exec: Execution) -> Result<Metrics> {
    let logits = predict(model, data, exec)?;
    Ok(match &data.labels {
        Labels::Single(y) => metrics::single_label(&logits, y),
        Labels::Multi(y) => metrics::multi_label(&logits, y),
    })
}
