//! AdamW and the warmup-cosine learning-rate schedule.

use std::sync::Arc;

use crate::encoder::Param;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments, one pair per parameter, kept in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, params: &[Param<T>]) -> Self {
        AdamW {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Decay (`p ← p·(1 − lr·wd)`) applies only to parameters
    /// flagged `decay`, before the bias-corrected Adam step. Rejects the whole
    /// step, leaving parameters untouched, if any gradient is non-finite.
    pub fn step<T: Scalar>(&mut self, params: &mut [Param<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("adamw_step", p.value.shape(), g.shape()));
            }
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                    count: bad,
                });
            }
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = Arc::make_mut(&mut p.value).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j].as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                w[j] = T::cast_from(w[j].as_f64() * decay - lr * upd);
            }
        }
        Ok(())
    }
}

/// Linear ramp to `lr_peak` over the first `warmup_frac` of training, then
/// cosine decay to zero. `progress` is the fraction of training completed.
pub fn cosine_warmup_lr(progress: f64, warmup_frac: f64, lr_peak: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    if p < warmup_frac {
        return lr_peak * p / warmup_frac;
    }
    let decay = if warmup_frac < 1.0 { (p - warmup_frac) / (1.0 - warmup_frac) } else { 1.0 };
    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * decay).cos())
}
