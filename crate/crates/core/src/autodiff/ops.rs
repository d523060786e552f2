use super::{MatMode, Node, Op};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, Conv1dGeom, Conv2dGeom};
use crate::tensor::{Scalar, Tensor};

/// Scalar elementwise functions with known derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryFn {
    /// `a + 1` for `a ≥ 0`, `exp(a)` otherwise.
    EluPlusOne,
    Relu,
    /// `log(1 + exp(a))` evaluated as `max(a, 0) + log1p(exp(-|a|))`.
    Softplus,
    Exp,
}

impl UnaryFn {
    #[inline]
    pub fn apply<T: Scalar>(self, a: T) -> T {
        match self {
            UnaryFn::EluPlusOne => {
                if a >= T::zero() {
                    a + T::one()
                } else {
                    a.exp()
                }
            }
            UnaryFn::Relu => a.max(T::zero()),
            UnaryFn::Softplus => a.max(T::zero()) + (-a.abs()).exp().ln_1p(),
            UnaryFn::Exp => a.exp(),
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, a: T) -> T {
        match self {
            UnaryFn::EluPlusOne => {
                if a >= T::zero() {
                    T::one()
                } else {
                    a.exp()
                }
            }
            UnaryFn::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryFn::Softplus => {
                if a >= T::zero() {
                    T::one() / (T::one() + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (T::one() + e)
                }
            }
            UnaryFn::Exp => a.exp(),
        }
    }
}

pub(super) fn matmul_forward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: MatMode,
) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k, n, ok) = match mode {
        MatMode::NN => (ar, ac, bc, ac == br),
        MatMode::NT => (ar, ac, br, ac == bc),
        MatMode::TN => (ac, ar, bc, ar == br),
    };
    if !ok {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let c = match mode {
        MatMode::NN => kernels::matmul_nn(a.data(), b.data(), m, k, n),
        MatMode::NT => kernels::matmul_nt(a.data(), b.data(), m, k, n),
        MatMode::TN => kernels::matmul_tn(a.data(), b.data(), k, m, n),
    };
    Ok(Tensor::from_parts(vec![m, n], c))
}

pub(super) fn add_row_forward<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    if bias.len() != n {
        return Err(Error::shape("add_row", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    let b = bias.data();
    for i in 0..m {
        for (o, &bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(b) {
            *o = *o + bv;
        }
    }
    Ok(out)
}

type LayerNormOut<T> = (Tensor<T>, Vec<T>, Vec<T>);

pub(super) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<LayerNormOut<T>> {
    let d = *x.shape().last().expect("rank >= 1");
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let m = x.len() / d;
    let (xhat, rstd) = kernels::normalize_rows(x.data(), m, d, eps);
    let (g, b) = (gamma.data(), beta.data());
    let out: Vec<T> = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| v * g[i % d] + b[i % d])
        .collect();
    Ok((Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd))
}

pub(super) fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Conv1dGeom)> {
    let (n, c_in) = x.dims2()?;
    let &[kernel, wc, c_out] = w.shape() else {
        return Err(Error::shape("conv1d", x.shape(), w.shape()));
    };
    if wc != c_in {
        return Err(Error::shape("conv1d", x.shape(), w.shape()));
    }
    let n_out = kernels::window_out_len("conv1d", n, kernel, stride, pad)?;
    let geom = Conv1dGeom {
        n,
        c_in,
        c_out,
        kernel,
        stride,
        pad,
        n_out,
    };
    let y = kernels::conv1d_forward(x.data(), w.data(), &geom);
    Ok((Tensor::from_parts(vec![n_out, c_out], y), geom))
}

pub(super) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Tensor<T>, Conv2dGeom)> {
    let (&[h, wd, c_in], &[kh, kw, wc, c_out]) = (x.shape(), w.shape()) else {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    };
    if wc != c_in {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    let h_out = kernels::window_out_len("conv2d", h, kh, stride.0, pad.0)?;
    let w_out = kernels::window_out_len("conv2d", wd, kw, stride.1, pad.1)?;
    let geom = Conv2dGeom {
        h,
        w: wd,
        c_in,
        c_out,
        kernel: (kh, kw),
        stride,
        pad,
        h_out,
        w_out,
    };
    let y = kernels::conv2d_forward(x.data(), w.data(), &geom);
    Ok((Tensor::from_parts(vec![h_out, w_out, c_out], y), geom))
}

pub(super) fn avg_pool1d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Conv1dGeom)> {
    let (n, c) = x.dims2()?;
    let n_out = kernels::window_out_len("avg_pool1d", n, kernel, stride, pad)?;
    let geom = Conv1dGeom {
        n,
        c_in: c,
        c_out: c,
        kernel,
        stride,
        pad,
        n_out,
    };
    let y = kernels::avg_pool1d_forward(x.data(), c, &geom);
    Ok((Tensor::from_parts(vec![n_out, c], y), geom))
}

pub(super) fn avg_pool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Tensor<T>, Conv2dGeom)> {
    let &[h, w, c] = x.shape() else {
        return Err(Error::Contract(format!(
            "avg_pool2d expects [H, W, C], got {:?}",
            x.shape()
        )));
    };
    let h_out = kernels::window_out_len("avg_pool2d", h, kernel.0, stride.0, pad.0)?;
    let w_out = kernels::window_out_len("avg_pool2d", w, kernel.1, stride.1, pad.1)?;
    let geom = Conv2dGeom {
        h,
        w,
        c_in: c,
        c_out: c,
        kernel,
        stride,
        pad,
        h_out,
        w_out,
    };
    let y = kernels::avg_pool2d_forward(x.data(), c, &geom);
    Ok((Tensor::from_parts(vec![h_out, w_out, c], y), geom))
}

pub(super) fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    if len == 0 || start + len > n {
        return Err(Error::shape("slice_cols", x.shape(), &[start, len]));
    }
    let mut out = Vec::with_capacity(m * len);
    for i in 0..m {
        out.extend_from_slice(&x.data()[i * n + start..i * n + start + len]);
    }
    Ok(Tensor::from_parts(vec![m, len], out))
}

pub(super) fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    if len == 0 || start + len > m {
        return Err(Error::shape("slice_rows", x.shape(), &[start, len]));
    }
    Ok(Tensor::from_parts(
        vec![len, n],
        x.data()[start * n..(start + len) * n].to_vec(),
    ))
}

pub(super) fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (m, _) = parts[0].dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.dims2()?;
        if pm != m {
            return Err(Error::shape("concat_cols", parts[0].shape(), p.shape()));
        }
        widths.push(pn);
    }
    let n: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(super) fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (_, n) = parts[0].dims2()?;
    let mut m = 0;
    let mut out = Vec::new();
    for p in parts {
        let (pm, pn) = p.dims2()?;
        if pn != n {
            return Err(Error::shape("concat_rows", parts[0].shape(), p.shape()));
        }
        m += pm;
        out.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn t2<T: Scalar>(m: usize, n: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(vec![m, n], data)
}

/// Gradient contributions `(input id, gradient)` of one node.
pub(super) fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let wants = |id: usize| nodes[id].needs_grad;
    let mut out = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, mode } => {
            let (av, bv) = (val(*a), val(*b));
            let (gm, gn) = g.dims2()?;
            let (ar, ac) = av.dims2()?;
            let (br, bc) = bv.dims2()?;
            match mode {
                MatMode::NN => {
                    // a [m,k], b [k,n]
                    if wants(*a) {
                        out.push((*a, t2(ar, ac, kernels::matmul_nt(g.data(), bv.data(), gm, gn, br))));
                    }
                    if wants(*b) {
                        out.push((*b, t2(br, bc, kernels::matmul_tn(av.data(), g.data(), ar, ac, gn))));
                    }
                }
                MatMode::NT => {
                    // a [m,k], b [n,k]
                    if wants(*a) {
                        out.push((*a, t2(ar, ac, kernels::matmul_nn(g.data(), bv.data(), gm, gn, bc))));
                    }
                    if wants(*b) {
                        out.push((*b, t2(br, bc, kernels::matmul_tn(g.data(), av.data(), gm, gn, ac))));
                    }
                }
                MatMode::TN => {
                    // a [k,m], b [k,n]
                    if wants(*a) {
                        out.push((*a, t2(ar, ac, kernels::matmul_nt(bv.data(), g.data(), br, bc, gm))));
                    }
                    if wants(*b) {
                        out.push((*b, t2(br, bc, kernels::matmul_nn(av.data(), g.data(), ar, ac, gn))));
                    }
                }
            }
        }
        Op::Add { a, b } => {
            out.push((*a, g.clone()));
            out.push((*b, g.clone()));
        }
        Op::AddRow { x, bias } => {
            out.push((*x, g.clone()));
            if wants(*bias) {
                let (m, n) = g.dims2()?;
                let mut db = vec![T::zero(); n];
                for i in 0..m {
                    for (d, &gv) in db.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                        *d = *d + gv;
                    }
                }
                out.push((*bias, Tensor::from_parts(val(*bias).shape().to_vec(), db)));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let prod = |t: &Tensor<T>| {
                Tensor::from_parts(
                    t.shape().to_vec(),
                    g.data().iter().zip(t.data()).map(|(&x, &y)| x * y).collect(),
                )
            };
            if wants(*a) {
                out.push((*a, prod(bv)));
            }
            if wants(*b) {
                out.push((*b, prod(av)));
            }
        }
        Op::Scale { x, c } => out.push((*x, g.map(|v| v * *c))),
        Op::Unary { x, f } => {
            let xv = val(*x);
            out.push((
                *x,
                Tensor::from_parts(
                    xv.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &a)| gv * f.derivative(a))
                        .collect(),
                ),
            ));
        }
        Op::SoftmaxRows { x } => {
            let y = &node.value;
            let (m, n) = y.dims2()?;
            let mut dx = vec![T::zero(); m * n];
            for i in 0..m {
                let yr = &y.data()[i * n..(i + 1) * n];
                let gr = &g.data()[i * n..(i + 1) * n];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in dx[i * n..(i + 1) * n].iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            out.push((*x, t2(m, n, dx)));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gm = val(*gamma).data();
            let d = gm.len();
            let m = xhat.len() / d;
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = vec![T::zero(); xhat.len()];
            let inv_d = T::cast_from(1.0 / d as f64);
            let mut dxhat = vec![T::zero(); d];
            for i in 0..m {
                let gr = &g.data()[i * d..(i + 1) * d];
                let xr = &xhat[i * d..(i + 1) * d];
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_x = T::zero();
                for j in 0..d {
                    dgamma[j] = dgamma[j] + gr[j] * xr[j];
                    dbeta[j] = dbeta[j] + gr[j];
                    dxhat[j] = gr[j] * gm[j];
                    mean_dxhat = mean_dxhat + dxhat[j];
                    mean_dxhat_x = mean_dxhat_x + dxhat[j] * xr[j];
                }
                mean_dxhat = mean_dxhat * inv_d;
                mean_dxhat_x = mean_dxhat_x * inv_d;
                for j in 0..d {
                    dx[i * d + j] = rstd[i] * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_x);
                }
            }
            out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
            if wants(*gamma) {
                out.push((*gamma, Tensor::from_parts(val(*gamma).shape().to_vec(), dgamma)));
            }
            if wants(*beta) {
                out.push((*beta, Tensor::from_parts(val(*beta).shape().to_vec(), dbeta)));
            }
        }
        Op::Conv1d { x, w, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let (dx, dw) = kernels::conv1d_backward(xv.data(), wv.data(), g.data(), geom);
            out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            out.push((*w, Tensor::from_parts(wv.shape().to_vec(), dw)));
        }
        Op::Conv2d { x, w, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let (dx, dw) = kernels::conv2d_backward(xv.data(), wv.data(), g.data(), geom);
            out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            out.push((*w, Tensor::from_parts(wv.shape().to_vec(), dw)));
        }
        Op::AvgPool1d { x, geom } => {
            let dx = kernels::avg_pool1d_backward(g.data(), geom.c_in, geom);
            out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
        }
        Op::AvgPool2d { x, geom } => {
            let dx = kernels::avg_pool2d_backward(g.data(), geom.c_in, geom);
            out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
        }
        Op::SliceCols { x, start } => {
            let (m, n) = val(*x).dims2()?;
            let (_, len) = g.dims2()?;
            let mut dx = vec![T::zero(); m * n];
            for i in 0..m {
                dx[i * n + start..i * n + start + len]
                    .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
            }
            out.push((*x, t2(m, n, dx)));
        }
        Op::SliceRows { x, start } => {
            let (m, n) = val(*x).dims2()?;
            let mut dx = vec![T::zero(); m * n];
            dx[start * n..start * n + g.len()].copy_from_slice(g.data());
            out.push((*x, t2(m, n, dx)));
        }
        Op::ConcatCols { parts } => {
            let (m, n) = g.dims2()?;
            let mut offset = 0;
            for &p in parts {
                let (_, w) = val(p).dims2()?;
                if wants(p) {
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&g.data()[i * n + offset..i * n + offset + w]);
                    }
                    out.push((p, t2(m, w, dp)));
                }
                offset += w;
            }
        }
        Op::ConcatRows { parts } => {
            let (_, n) = g.dims2()?;
            let mut row = 0;
            for &p in parts {
                let (pm, _) = val(p).dims2()?;
                if wants(p) {
                    out.push((p, t2(pm, n, g.data()[row * n..(row + pm) * n].to_vec())));
                }
                row += pm;
            }
        }
        Op::Reshape { x } => {
            out.push((*x, g.clone().reshape(val(*x).shape())?));
        }
        Op::Sum { x } => {
            out.push((*x, Tensor::full(val(*x).shape(), g.data()[0])));
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let grads = op.backward(&ins, &node.value, g)?;
            if grads.len() != inputs.len() {
                return Err(Error::Contract(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    grads.len(),
                    inputs.len()
                )));
            }
            for (&i, dg) in inputs.iter().zip(grads) {
                if let Some(dg) = dg {
                    if dg.shape() != val(i).shape() {
                        return Err(Error::shape(op.name(), val(i).shape(), dg.shape()));
                    }
                    out.push((i, dg));
                }
            }
        }
    }
    Ok(out)
}
