//! Classification losses as fused graph ops over `[B, C]` logits.

use crate::autodiff::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// Target distribution: `1 - s` on the label, `s / (C - 1)` elsewhere.
fn smoothed(c: usize, target: usize, s: f64, j: usize) -> f64 {
    if c == 1 {
        1.0
    } else if j == target {
        1.0 - s
    } else {
        s / (c - 1) as f64
    }
}

struct CrossEntropyOp {
    targets: Vec<usize>,
    smoothing: f64,
}

impl<T: Scalar> CustomOp<T> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (b, c) = inputs[0].dims2()?;
        let up = grad.data()[0].as_f64() / b as f64;
        let z = inputs[0].to_f64_vec();
        let mut out = vec![T::zero(); b * c];
        for (i, &t) in self.targets.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                let p = (row[j] - lse).exp();
                out[i * c + j] = T::cast_from(up * (p - smoothed(c, t, self.smoothing, j)));
            }
        }
        Ok(vec![Some(Tensor::new(&[b, c], out)?)])
    }
}

/// Mean over rows of the cross-entropy between `softmax(logits)` and the
/// label-smoothed target distribution.
pub fn cross_entropy_ls<'g, T: Scalar>(logits: Var<'g, T>, targets: &[usize], smoothing: f64) -> Result<Var<'g, T>> {
    let value = logits.value();
    let (b, c) = value.dims2()?;
    if targets.len() != b {
        return Err(Error::shape("cross_entropy_ls", &[b, c], &[targets.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing must lie in [0, 1), got {smoothing}")));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Contract(format!("target {t} out of range for {c} classes")));
    }
    let z = value.to_f64_vec();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &z[i * c..(i + 1) * c];
        let lse = log_sum_exp(row);
        total += (0..c).map(|j| smoothed(c, t, smoothing, j) * (lse - row[j])).sum::<f64>();
    }
    let loss = Tensor::scalar(T::cast_from(total / b as f64));
    let op = CrossEntropyOp {
        targets: targets.to_vec(),
        smoothing,
    };
    Ok(logits.graph().custom(&[logits], loss, Box::new(op)))
}

/// `log(1 + exp(z)) - y z`, stable for large `|z|`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct WeightedBceOp {
    targets: Vec<f64>,
    alpha: f64,
}

impl<T: Scalar> CustomOp<T> for WeightedBceOp {
    fn name(&self) -> &'static str {
        "weighted_bce"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (b, c) = inputs[0].dims2()?;
        let up = grad.data()[0].as_f64();
        // d/dl_ic of the example-wise term is 1/(B C); of the label-wise term 1/(C B)
        let w = up * (self.alpha / (b * c) as f64 + (1.0 - self.alpha) / (c * b) as f64);
        let out = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(&z, &y)| T::cast_from(w * (sigmoid(z.as_f64()) - y)))
            .collect();
        Ok(vec![Some(Tensor::new(&[b, c], out)?)])
    }
}

/// `alpha · mean_i(mean_c l_ic) + (1 - alpha) · mean_c(mean_i l_ic)` with `l` the
/// per-entry logit-space BCE.
pub fn weighted_bce<'g, T: Scalar>(logits: Var<'g, T>, targets: &Tensor<T>, alpha: f64) -> Result<Var<'g, T>> {
    let value = logits.value();
    let (b, c) = value.dims2()?;
    if targets.shape() != value.shape() {
        return Err(Error::shape("weighted_bce", value.shape(), targets.shape()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let y = targets.to_f64_vec();
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("weighted_bce targets must be 0 or 1".into()));
    }
    let l: Vec<f64> = value.to_f64_vec().iter().zip(&y).map(|(&z, &t)| bce_with_logits(z, t)).collect();
    let per_example = (0..b).map(|i| l[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).sum::<f64>() / b as f64;
    let per_label = (0..c).map(|j| (0..b).map(|i| l[i * c + j]).sum::<f64>() / b as f64).sum::<f64>() / c as f64;
    let loss = alpha * per_example + (1.0 - alpha) * per_label;
    let op = WeightedBceOp { targets: y, alpha };
    Ok(logits.graph().custom(&[logits], Tensor::scalar(T::cast_from(loss)), Box::new(op)))
}
