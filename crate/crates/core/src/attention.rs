//! Exact softmax attention, kernel-feature approximate attention, and the
//! per-block rule that picks between them.
//!
//! The approximate path reassociates `ψ(Q) ψ(K)ᵀ V` as `ψ(Q) (ψ(K)ᵀ V)`, so
//! per head it only ever holds a `d × d` summary and a length-`d`
//! normalizer vector, never an `N × N` matrix.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{concat_cols, CustomOp, UnaryFn, Var};
use crate::error::{Error, Result};
use crate::tensor::alloc::Buffer;
use crate::tensor::kernels;
use crate::tensor::{Scalar, Tensor};

/// Default floor added to the approximate-attention normalizer.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Nonnegative feature function applied to queries and keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum FeatureMap {
    #[default]
    EluPlusOne,
    Relu,
    Softplus,
}

impl FeatureMap {
    pub const ALL: [FeatureMap; 3] = [FeatureMap::EluPlusOne, FeatureMap::Relu, FeatureMap::Softplus];

    pub fn unary(self) -> UnaryFn {
        match self {
            FeatureMap::EluPlusOne => UnaryFn::EluPlusOne,
            FeatureMap::Relu => UnaryFn::Relu,
            FeatureMap::Softplus => UnaryFn::Softplus,
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, a: T) -> T {
        self.unary().apply(a)
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::EluPlusOne => "elu",
            FeatureMap::Relu => "relu",
            FeatureMap::Softplus => "softplus",
        }
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" | "elu1" | "elu_plus_one" => Ok(FeatureMap::EluPlusOne),
            "relu" => Ok(FeatureMap::Relu),
            "softplus" => Ok(FeatureMap::Softplus),
            other => Err(Error::Config(format!("unknown feature map `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Dot,
    Approx(FeatureMap),
}

impl AttentionKind {
    pub fn is_dot(self) -> bool {
        matches!(self, AttentionKind::Dot)
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionKind::Dot => f.write_str("dot"),
            AttentionKind::Approx(psi) => write!(f, "approx-{psi}"),
        }
    }
}

/// Approximate attention when tokens outnumber features, exact otherwise.
/// Ties go to exact attention.
pub fn select_attention(n_tokens: usize, dim: usize, psi: FeatureMap) -> AttentionKind {
    if n_tokens > dim {
        AttentionKind::Approx(psi)
    } else {
        AttentionKind::Dot
    }
}

/// Head-major attention operands, each `[h, N, d_head]`.
#[derive(Clone, Debug)]
pub struct AttentionInputs<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub tau: f64,
    pub eps: f64,
}

impl<T: Scalar> AttentionInputs<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>, tau: f64, eps: f64) -> Result<Self> {
        if q.rank() != 3 {
            return Err(Error::Contract(format!(
                "attention operands must be [h, N, d], got {:?}",
                q.shape()
            )));
        }
        if q.shape() != k.shape() {
            return Err(Error::shape("attention", q.shape(), k.shape()));
        }
        if q.shape() != v.shape() {
            return Err(Error::shape("attention", q.shape(), v.shape()));
        }
        if !(tau > 0.0) || !(eps > 0.0) {
            return Err(Error::Config(format!(
                "tau and eps must be positive (tau={tau}, eps={eps})"
            )));
        }
        Ok(AttentionInputs { q, k, v, tau, eps })
    }

    /// `(heads, tokens, d_head)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.q.shape();
        (s[0], s[1], s[2])
    }
}

/// Per-head `softmax(Q Kᵀ / √d) V`.
pub fn dot_attention<T: Scalar>(inp: &AttentionInputs<T>) -> Result<Tensor<T>> {
    let (h, n, d) = inp.dims();
    let scale = T::cast_from(1.0 / (d as f64).sqrt());
    let mut out = Tensor::zeros(&[h, n, d]);
    for head in 0..h {
        let r = head * n * d..(head + 1) * n * d;
        let mut scores: Tensor<T> = Tensor::from_parts(
            vec![n, n],
            kernels::matmul_nt(&inp.q.data()[r.clone()], &inp.k.data()[r.clone()], n, d, n),
        );
        scores.scale_in_place(scale);
        let probs: Tensor<T> =
            Tensor::from_parts(vec![n, n], kernels::softmax_rows(scores.data(), n, n)?);
        drop(scores);
        let o = kernels::matmul_nn(probs.data(), &inp.v.data()[r.clone()], n, n, d);
        out.data_mut()[r].copy_from_slice(&o);
    }
    Ok(out)
}

/// Strided view of one head inside a flat buffer: element `(i, a)` lives at
/// `base + i * row_stride + a`.
#[derive(Clone, Copy)]
struct HeadView {
    base: usize,
    row_stride: usize,
    n: usize,
    d: usize,
}

impl HeadView {
    #[inline]
    fn row<'a, T>(&self, buf: &'a [T], i: usize) -> &'a [T] {
        let s = self.base + i * self.row_stride;
        &buf[s..s + self.d]
    }
}

/// `(S, z)` with `S = (1/τ) ψ(K)ᵀ V` (row-major `d × d`) and `z = (1/τ) ψ(K)ᵀ 1`,
/// accumulated in f64.
fn kv_summary<T: Scalar>(
    k: &[T],
    v: &[T],
    view: HeadView,
    psi: FeatureMap,
    tau: f64,
) -> (Buffer<f64>, Buffer<f64>) {
    let d = view.d;
    let mut s = Buffer::from_vec(vec![0.0f64; d * d]);
    let mut z = Buffer::from_vec(vec![0.0f64; d]);
    let mut kf = vec![0.0f64; d];
    let inv_tau = 1.0 / tau;
    for j in 0..view.n {
        for (f, &kv) in kf.iter_mut().zip(view.row(k, j)) {
            *f = psi.apply(kv).as_f64() * inv_tau;
        }
        let vrow = view.row(v, j);
        for a in 0..d {
            z[a] += kf[a];
            let srow = &mut s[a * d..(a + 1) * d];
            for (sv, &vv) in srow.iter_mut().zip(vrow) {
                *sv += kf[a] * vv.as_f64();
            }
        }
    }
    (s, z)
}

/// Writes one head of approximate attention into `out` (same layout as `q`).
#[allow(clippy::too_many_arguments)]
fn approx_head_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &mut [T],
    view: HeadView,
    head: usize,
    psi: FeatureMap,
    tau: f64,
    eps: f64,
) -> Result<()> {
    let d = view.d;
    let (s, z) = kv_summary(k, v, view, psi, tau);
    let floor = eps / tau;
    let mut qf = vec![0.0f64; d];
    let mut num = vec![0.0f64; d];
    for i in 0..view.n {
        for (f, &qv) in qf.iter_mut().zip(view.row(q, i)) {
            *f = psi.apply(qv).as_f64();
        }
        num.iter_mut().for_each(|x| *x = 0.0);
        let mut den = floor;
        for a in 0..d {
            den += qf[a] * z[a];
            for (nv, &sv) in num.iter_mut().zip(&s[a * d..(a + 1) * d]) {
                *nv += qf[a] * sv;
            }
        }
        if !den.is_finite() {
            return Err(Error::Numeric(format!(
                "approximate-attention normalizer is {den} at head {head}, row {i}"
            )));
        }
        let o = view.base + i * view.row_stride;
        for (ov, &nv) in out[o..o + d].iter_mut().zip(&num) {
            *ov = T::cast_from(nv / den);
        }
    }
    Ok(())
}

/// Per-head `ψ(Q) S / (ψ(Q) z + ε/τ)`; see [`kv_summary`].
///
/// The floor is divided by `τ` along with the numerator and normalizer, which
/// makes the result independent of `τ` in exact arithmetic.
pub fn approx_attention<T: Scalar>(inp: &AttentionInputs<T>, psi: FeatureMap) -> Result<Tensor<T>> {
    let (h, n, d) = inp.dims();
    let mut out = Tensor::zeros(&[h, n, d]);
    for head in 0..h {
        let view = HeadView {
            base: head * n * d,
            row_stride: d,
            n,
            d,
        };
        approx_head_forward(
            inp.q.data(),
            inp.k.data(),
            inp.v.data(),
            out.data_mut(),
            view,
            head,
            psi,
            inp.tau,
            inp.eps,
        )?;
    }
    Ok(out)
}

/// Reference form that materializes the `N × N` kernel matrix
/// `(1/τ) ψ(Q) ψ(K)ᵀ`, normalizes its rows and multiplies by `V`.
/// Quadratic in `N`; only suitable for small inputs.
pub fn naive_approx_oracle<T: Scalar>(inp: &AttentionInputs<T>, psi: FeatureMap) -> Result<Tensor<T>> {
    let (h, n, d) = inp.dims();
    let mut out = vec![T::zero(); h * n * d];
    for head in 0..h {
        let base = head * n * d;
        let qf: Vec<f64> = inp.q.data()[base..base + n * d]
            .iter()
            .map(|&x| psi.apply(x).as_f64())
            .collect();
        let kf: Vec<f64> = inp.k.data()[base..base + n * d]
            .iter()
            .map(|&x| psi.apply(x).as_f64())
            .collect();
        let mut kernel = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..d).map(|a| qf[i * d + a] * kf[j * d + a]).sum();
                kernel[i * n + j] = dot / inp.tau;
            }
        }
        for i in 0..n {
            let z: f64 = kernel[i * n..(i + 1) * n].iter().sum::<f64>() + inp.eps / inp.tau;
            for b in 0..d {
                let acc: f64 = (0..n)
                    .map(|j| kernel[i * n + j] * inp.v.data()[base + j * d + b].as_f64())
                    .sum();
                out[base + i * d + b] = T::cast_from(acc / z);
            }
        }
    }
    Tensor::new(&[h, n, d], out)
}

/// Graph op for approximate attention over `[N, D]` operands split into `heads`
/// column groups.
struct ApproxAttentionOp {
    heads: usize,
    psi: FeatureMap,
    tau: f64,
    eps: f64,
}

impl<T: Scalar> CustomOp<T> for ApproxAttentionOp {
    fn name(&self) -> &'static str {
        "approx_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, dim) = q.dims2()?;
        let d = dim / self.heads;
        let mut dq = vec![T::zero(); n * dim];
        let mut dk = vec![T::zero(); n * dim];
        let mut dv = vec![T::zero(); n * dim];
        let inv_tau = 1.0 / self.tau;
        let floor = self.eps / self.tau;
        let psi = self.psi;
        let f = psi.unary();
        for head in 0..self.heads {
            let view = HeadView {
                base: head * d,
                row_stride: dim,
                n,
                d,
            };
            let (s, z) = kv_summary(k.data(), v.data(), view, psi, self.tau);
            let mut ds = vec![0.0f64; d * d];
            let mut dz = vec![0.0f64; d];
            let mut qf = vec![0.0f64; d];
            let mut dnum = vec![0.0f64; d];
            for i in 0..n {
                let qrow = view.row(q.data(), i);
                for (x, &qv) in qf.iter_mut().zip(qrow) {
                    *x = psi.apply(qv).as_f64();
                }
                let den = floor + qf.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>();
                let grow = view.row(grad.data(), i);
                let orow = view.row(output.data(), i);
                let mut g_dot_o = 0.0;
                for b in 0..d {
                    dnum[b] = grow[b].as_f64() / den;
                    g_dot_o += grow[b].as_f64() * orow[b].as_f64();
                }
                let dden = -g_dot_o / den;
                let o = view.base + i * dim;
                for a in 0..d {
                    let srow = &s[a * d..(a + 1) * d];
                    let dqf = dnum.iter().zip(srow).map(|(x, y)| x * y).sum::<f64>() + dden * z[a];
                    dq[o + a] = T::cast_from(dqf * f.derivative(qrow[a]).as_f64());
                    dz[a] += dden * qf[a];
                    for (dsv, &dn) in ds[a * d..(a + 1) * d].iter_mut().zip(&dnum) {
                        *dsv += qf[a] * dn;
                    }
                }
            }
            for j in 0..n {
                let krow = view.row(k.data(), j);
                let vrow = view.row(v.data(), j);
                let o = view.base + j * dim;
                for a in 0..d {
                    let dsrow = &ds[a * d..(a + 1) * d];
                    let dkf = (dsrow
                        .iter()
                        .zip(vrow)
                        .map(|(x, y)| x * y.as_f64())
                        .sum::<f64>()
                        + dz[a])
                        * inv_tau;
                    dk[o + a] = T::cast_from(dkf * f.derivative(krow[a]).as_f64());
                }
                for b in 0..d {
                    let mut acc = 0.0;
                    for a in 0..d {
                        acc += psi.apply(krow[a]).as_f64() * ds[a * d + b];
                    }
                    dv[o + b] = T::cast_from(acc * inv_tau);
                }
            }
        }
        let shape = q.shape().to_vec();
        Ok(vec![
            Some(Tensor::from_parts(shape.clone(), dq)),
            Some(Tensor::from_parts(shape.clone(), dk)),
            Some(Tensor::from_parts(shape, dv)),
        ])
    }
}

fn check_heads(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<(usize, usize)> {
    let &[n, dim] = q else {
        return Err(Error::Contract(format!("attention expects [N, D], got {q:?}")));
    };
    if k != q {
        return Err(Error::shape("attention", q, k));
    }
    if v != q {
        return Err(Error::shape("attention", q, v));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide embedding dimension {dim}"
        )));
    }
    Ok((n, dim))
}

/// Multi-head exact attention on `[N, D]` graph operands.
pub fn dot_attention_var<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
) -> Result<Var<'g, T>> {
    let (_, dim) = check_heads(&q.shape(), &k.shape(), &v.shape(), heads)?;
    let d = dim / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let head = |qh: Var<'g, T>, kh: Var<'g, T>, vh: Var<'g, T>| -> Result<Var<'g, T>> {
        qh.matmul_nt(kh)?.scale(scale).softmax_rows()?.matmul(vh)
    };
    if heads == 1 {
        return head(q, k, v);
    }
    let outs = (0..heads)
        .map(|h| {
            head(
                q.slice_cols(h * d, d)?,
                k.slice_cols(h * d, d)?,
                v.slice_cols(h * d, d)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    concat_cols(&outs)
}

/// Multi-head approximate attention on `[N, D]` graph operands.
pub fn approx_attention_var<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
    psi: FeatureMap,
    tau: f64,
    eps: f64,
) -> Result<Var<'g, T>> {
    let (n, dim) = check_heads(&q.shape(), &k.shape(), &v.shape(), heads)?;
    if !(tau > 0.0) || !(eps > 0.0) {
        return Err(Error::Config(format!(
            "tau and eps must be positive (tau={tau}, eps={eps})"
        )));
    }
    let d = dim / heads;
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let mut out = Tensor::zeros(&[n, dim]);
    for head in 0..heads {
        let view = HeadView {
            base: head * d,
            row_stride: dim,
            n,
            d,
        };
        approx_head_forward(
            qv.data(),
            kv.data(),
            vv.data(),
            out.data_mut(),
            view,
            head,
            psi,
            tau,
            eps,
        )?;
    }
    let op = ApproxAttentionOp { heads, psi, tau, eps };
    Ok(q.graph().custom(&[q, k, v], out, Box::new(op)))
}

/// How `τ` is chosen for a block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauRule {
    /// `τ = √N` with `N` the non-CLS token count.
    SqrtTokens,
    Fixed(f64),
}

impl TauRule {
    pub fn resolve(self, n_tokens: usize) -> f64 {
        match self {
            TauRule::SqrtTokens => (n_tokens.max(1) as f64).sqrt(),
            TauRule::Fixed(t) => t,
        }
    }
}

/// Projection weights of one attention layer, all `[D, D]` / `[D]`.
#[derive(Clone, Copy, Debug)]
pub struct MhsaWeights<'g, T: Scalar> {
    pub wq: Var<'g, T>,
    pub bq: Var<'g, T>,
    pub wk: Var<'g, T>,
    pub bk: Var<'g, T>,
    pub wv: Var<'g, T>,
    pub bv: Var<'g, T>,
    pub wo: Var<'g, T>,
    pub bo: Var<'g, T>,
}

/// Q/K/V projection, head split, the chosen attention, head concat and output
/// projection over `[N+1, D]` rows (CLS at row 0, treated as an ordinary token).
pub fn mhsa_forward<'g, T: Scalar>(
    x: Var<'g, T>,
    w: &MhsaWeights<'g, T>,
    kind: AttentionKind,
    heads: usize,
    tau: TauRule,
    eps: f64,
) -> Result<Var<'g, T>> {
    let (rows, dim) = {
        let s = x.shape();
        match s[..] {
            [r, d] => (r, d),
            _ => return Err(Error::Contract(format!("mhsa expects [N+1, D], got {s:?}"))),
        }
    };
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide embedding dimension {dim}"
        )));
    }
    let q = x.matmul(w.wq)?.add_row(w.bq)?;
    let k = x.matmul(w.wk)?.add_row(w.bk)?;
    let v = x.matmul(w.wv)?.add_row(w.bv)?;
    let attended = match kind {
        AttentionKind::Dot => dot_attention_var(q, k, v, heads)?,
        AttentionKind::Approx(psi) => {
            approx_attention_var(q, k, v, heads, psi, tau.resolve(rows.saturating_sub(1)), eps)?
        }
    };
    attended.matmul(w.wo)?.add_row(w.bo)
}
