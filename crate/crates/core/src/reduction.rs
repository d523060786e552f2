//! Token merging between blocks and the dimension expansion that follows it.
//!
//! The CLS row (row 0) never takes part in merging; it is split off, the
//! remaining tokens are merged, and CLS is re-attached on top. Expansion is a
//! per-row affine map and applies to CLS as well.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{concat_rows, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum MergeKind {
    /// Strided convolution, window `2ν+1` and stride `ν`; on grids window `ν-1`
    /// and stride `ν/2` per axis.
    #[default]
    Conv,
    /// Unweighted mean over the same windows; padding counts in the divisor.
    AvgPool,
    /// One dense `N → N/ν` map over the token axis, shared by all channels.
    Linear,
    /// Tokens pass through unmerged; only the dimension expansion runs.
    None,
}

impl MergeKind {
    pub fn name(self) -> &'static str {
        match self {
            MergeKind::Conv => "conv",
            MergeKind::AvgPool => "pool",
            MergeKind::Linear => "linear",
            MergeKind::None => "none",
        }
    }
}

impl fmt::Display for MergeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(MergeKind::Conv),
            "pool" | "avgpool" => Ok(MergeKind::AvgPool),
            "linear" => Ok(MergeKind::Linear),
            "none" => Ok(MergeKind::None),
            other => Err(Error::Config(format!("unknown merge kind `{other}`"))),
        }
    }
}

/// Arrangement of the non-CLS tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenLayout {
    Seq1D(usize),
    Grid2D { h: usize, w: usize },
}

impl TokenLayout {
    pub fn tokens(self) -> usize {
        match self {
            TokenLayout::Seq1D(n) => n,
            TokenLayout::Grid2D { h, w } => h * w,
        }
    }
}

impl fmt::Display for TokenLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenLayout::Seq1D(n) => write!(f, "{n}"),
            TokenLayout::Grid2D { h, w } => write!(f, "{h}x{w}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReductionSpec {
    pub kind: MergeKind,
    pub nu: usize,
}

impl ReductionSpec {
    pub fn new(kind: MergeKind, nu: usize) -> Result<Self> {
        if nu < 2 {
            return Err(Error::Config(format!("reduction factor nu must be >= 2, got {nu}")));
        }
        Ok(ReductionSpec { kind, nu })
    }

    /// `(kernel, stride, pad)` along the token axis of a sequence.
    pub fn window_1d(&self) -> (usize, usize, usize) {
        (2 * self.nu + 1, self.nu, self.nu)
    }

    /// `(kernel, stride, pad)` along each axis of a grid.
    pub fn window_2d(&self) -> Result<(usize, usize, usize)> {
        if self.nu % 2 != 0 {
            return Err(Error::Config(format!(
                "grid merging uses stride nu/2 and needs an even nu, got {}",
                self.nu
            )));
        }
        let s = self.nu / 2;
        Ok((2 * s - 1, s, s - 1))
    }

    /// Layout after merging.
    pub fn out_layout(&self, layout: TokenLayout) -> Result<TokenLayout> {
        let ceil = |n: usize, s: usize| n.div_ceil(s);
        match (self.kind, layout) {
            (MergeKind::None, l) => Ok(l),
            (MergeKind::Conv | MergeKind::AvgPool, TokenLayout::Seq1D(n)) => {
                Ok(TokenLayout::Seq1D(ceil(n, self.nu)))
            }
            (MergeKind::Conv | MergeKind::AvgPool, TokenLayout::Grid2D { h, w }) => {
                let (_, s, _) = self.window_2d()?;
                Ok(TokenLayout::Grid2D {
                    h: ceil(h, s),
                    w: ceil(w, s),
                })
            }
            (MergeKind::Linear, TokenLayout::Seq1D(n)) => {
                if n % self.nu != 0 {
                    return Err(Error::Config(format!(
                        "linear merge needs nu={} to divide {n} tokens",
                        self.nu
                    )));
                }
                Ok(TokenLayout::Seq1D(n / self.nu))
            }
            (MergeKind::Linear, TokenLayout::Grid2D { h, w }) => {
                let (_, s, _) = self.window_2d()?;
                if h % s != 0 || w % s != 0 {
                    return Err(Error::Config(format!(
                        "linear merge needs {s} to divide the {h}x{w} grid"
                    )));
                }
                Ok(TokenLayout::Grid2D { h: h / s, w: w / s })
            }
        }
    }

    /// Shape of the merge weight for `dim` channels, `None` for weightless kinds.
    pub fn weight_shape(&self, layout: TokenLayout, dim: usize) -> Result<Option<Vec<usize>>> {
        Ok(match (self.kind, layout) {
            (MergeKind::Conv, TokenLayout::Seq1D(_)) => Some(vec![self.window_1d().0, dim, dim]),
            (MergeKind::Conv, TokenLayout::Grid2D { .. }) => {
                let (k, _, _) = self.window_2d()?;
                Some(vec![k, k, dim, dim])
            }
            (MergeKind::Linear, l) => {
                let out = self.out_layout(l)?.tokens();
                Some(vec![out, l.tokens()])
            }
            (MergeKind::AvgPool | MergeKind::None, _) => None,
        })
    }
}

/// Learned merge parameters for one transition.
#[derive(Clone, Copy, Debug)]
pub enum MergeWeights<'g, T: Scalar> {
    /// Convolution weight and bias `[D]`.
    Conv { w: Var<'g, T>, b: Var<'g, T> },
    /// Token-axis map `[N/ν, N]`.
    Linear { w: Var<'g, T> },
    Weightless,
}

/// Merges the tokens of `x: [N+1, D]`, leaving the CLS row untouched.
pub fn reduce_tokens<'g, T: Scalar>(
    x: Var<'g, T>,
    spec: &ReductionSpec,
    layout: TokenLayout,
    weights: MergeWeights<'g, T>,
) -> Result<(Var<'g, T>, TokenLayout)> {
    let shape = x.shape();
    let &[rows, dim] = &shape[..] else {
        return Err(Error::Contract(format!("reduce_tokens expects [N+1, D], got {shape:?}")));
    };
    let n = layout.tokens();
    if rows != n + 1 {
        return Err(Error::Layout(format!(
            "layout {layout} holds {n} tokens but the input has {} rows after CLS",
            rows.saturating_sub(1)
        )));
    }
    let out_layout = spec.out_layout(layout)?;
    if spec.kind == MergeKind::None {
        return Ok((x, out_layout));
    }
    let cls = x.slice_rows(0, 1)?;
    let tokens = x.slice_rows(1, n)?;
    let merged = match (spec.kind, layout, weights) {
        (MergeKind::Conv, TokenLayout::Seq1D(_), MergeWeights::Conv { w, b }) => {
            let (_, s, p) = spec.window_1d();
            tokens.conv1d(w, s, p)?.add_row(b)?
        }
        (MergeKind::Conv, TokenLayout::Grid2D { h, w: gw }, MergeWeights::Conv { w, b }) => {
            let (_, s, p) = spec.window_2d()?;
            tokens
                .reshape(&[h, gw, dim])?
                .conv2d(w, (s, s), (p, p))?
                .reshape(&[out_layout.tokens(), dim])?
                .add_row(b)?
        }
        (MergeKind::AvgPool, TokenLayout::Seq1D(_), _) => {
            let (k, s, p) = spec.window_1d();
            tokens.avg_pool1d(k, s, p)?
        }
        (MergeKind::AvgPool, TokenLayout::Grid2D { h, w }, _) => {
            let (k, s, p) = spec.window_2d()?;
            tokens
                .reshape(&[h, w, dim])?
                .avg_pool2d((k, k), (s, s), (p, p))?
                .reshape(&[out_layout.tokens(), dim])?
        }
        (MergeKind::Linear, _, MergeWeights::Linear { w }) => w.matmul(tokens)?,
        (kind, _, _) => {
            return Err(Error::Contract(format!("missing weights for {kind} merge")));
        }
    };
    Ok((concat_rows(&[cls, merged])?, out_layout))
}

/// `x · W + b` with `W: [D, 2D]`, applied to every row including CLS.
pub fn expand_dim<'g, T: Scalar>(x: Var<'g, T>, w: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || ws[1] != 2 * xs[1] {
        return Err(Error::shape("expand_dim", &xs, &ws));
    }
    x.matmul(w)?.add_row(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradcheckConfig, Graph};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn spec(kind: MergeKind) -> ReductionSpec {
        ReductionSpec::new(kind, 4).unwrap()
    }

    #[test]
    fn seq_2048_to_512() {
        assert_eq!(
            spec(MergeKind::Conv).out_layout(TokenLayout::Seq1D(2048)).unwrap(),
            TokenLayout::Seq1D(512)
        );
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2049, 4]));
        let w = g.constant(Tensor::zeros(&[9, 4, 4]));
        let b = g.constant(Tensor::zeros(&[4]));
        let (y, l) = reduce_tokens(x, &spec(MergeKind::Conv), TokenLayout::Seq1D(2048), MergeWeights::Conv { w, b }).unwrap();
        assert_eq!(y.shape(), vec![513, 4]);
        assert_eq!(l, TokenLayout::Seq1D(512));
    }

    #[test]
    fn grid_256x32_to_128x16() {
        let out = spec(MergeKind::Conv)
            .out_layout(TokenLayout::Grid2D { h: 256, w: 32 })
            .unwrap();
        assert_eq!(out, TokenLayout::Grid2D { h: 128, w: 16 });
        assert_eq!(out.tokens(), 2048);

        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[6 * 5 + 1, 2]));
        let w = g.constant(Tensor::zeros(&[3, 3, 2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        let (y, l) = reduce_tokens(x, &spec(MergeKind::Conv), TokenLayout::Grid2D { h: 6, w: 5 }, MergeWeights::Conv { w, b }).unwrap();
        assert_eq!(l, TokenLayout::Grid2D { h: 3, w: 3 });
        assert_eq!(y.shape(), vec![10, 2]);
    }

    #[test]
    fn token_count_law_random_lengths() {
        let mut r = rng(1);
        for _ in 0..50 {
            let n = r.random_range(1..5000);
            for kind in [MergeKind::Conv, MergeKind::AvgPool] {
                let out = spec(kind).out_layout(TokenLayout::Seq1D(n)).unwrap();
                assert_eq!(out.tokens(), n.div_ceil(4));
                // geometry of the actual window agrees with the closed form
                let (k, s, p) = spec(kind).window_1d();
                assert_eq!((n + 2 * p - k) / s + 1, n.div_ceil(4));
            }
            let (h, w) = (r.random_range(1..300), r.random_range(1..300));
            let out = spec(MergeKind::Conv).out_layout(TokenLayout::Grid2D { h, w }).unwrap();
            assert_eq!(out, TokenLayout::Grid2D { h: h.div_ceil(2), w: w.div_ceil(2) });
        }
    }

    #[test]
    fn avg_pool_preserves_constants_in_the_interior() {
        let g = Graph::<f64>::new();
        let n = 64;
        let x = g.constant(Tensor::full(&[n + 1, 3], 2.5));
        let (y, _) = reduce_tokens(x, &spec(MergeKind::AvgPool), TokenLayout::Seq1D(n), MergeWeights::Weightless).unwrap();
        let y = y.value();
        // windows 1..=14 lie fully inside the signal; the first and last touch padding
        for o in 1..15 {
            for &v in y.row(o + 1) {
                assert!((v - 2.5).abs() < 1e-15);
            }
        }
        assert!(y.row(1)[0] < 2.5);
    }

    #[test]
    fn averaging_conv_equals_avg_pool() {
        let mut r = rng(2);
        let (n, d) = (37, 3);
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(&[n + 1, d], 1.0, &mut r));
        let w = g.constant(Tensor::from_fn(&[9, d, d], |i| {
            let (ci, co) = ((i / d) % d, i % d);
            if ci == co { 1.0 / 9.0 } else { 0.0 }
        }));
        let b = g.constant(Tensor::zeros(&[d]));
        let (conv, _) = reduce_tokens(x, &spec(MergeKind::Conv), TokenLayout::Seq1D(n), MergeWeights::Conv { w, b }).unwrap();
        let (pool, _) = reduce_tokens(x, &spec(MergeKind::AvgPool), TokenLayout::Seq1D(n), MergeWeights::Weightless).unwrap();
        assert!(conv.value().max_rel_diff(&pool.value(), 1e-300) <= 1e-12);
    }

    #[test]
    fn linear_merge_with_row_normalized_weights_keeps_constants() {
        let mut r = rng(3);
        let n = 16;
        let g = Graph::<f64>::new();
        let raw = Tensor::<f64>::uniform(&[4, n], 0.1, 1.0, &mut r);
        let w = Tensor::from_fn(&[4, n], |i| {
            let row = i / n;
            raw.data()[i] / raw.row(row).iter().sum::<f64>()
        });
        let x = g.constant(Tensor::full(&[n + 1, 2], -1.25));
        let (y, l) = reduce_tokens(x, &spec(MergeKind::Linear), TokenLayout::Seq1D(n), MergeWeights::Linear { w: g.constant(w) }).unwrap();
        assert_eq!(l, TokenLayout::Seq1D(4));
        assert!(y.value().data().iter().all(|&v| (v + 1.25).abs() < 1e-14));
    }

    #[test]
    fn configuration_and_layout_errors() {
        assert!(matches!(
            spec(MergeKind::Linear).out_layout(TokenLayout::Seq1D(10)),
            Err(Error::Config(_))
        ));
        assert!(ReductionSpec::new(MergeKind::Conv, 1).is_err());
        assert!(ReductionSpec::new(MergeKind::Conv, 3)
            .unwrap()
            .out_layout(TokenLayout::Grid2D { h: 4, w: 4 })
            .is_err());
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[10, 2]));
        let err = reduce_tokens(x, &spec(MergeKind::AvgPool), TokenLayout::Grid2D { h: 2, w: 4 }, MergeWeights::Weightless).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn cls_bypasses_every_merge_kind() {
        let mut r = rng(4);
        let (n, d) = (8, 3);
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(&[n + 1, d], 1.0, &mut r));
        let ew = g.constant(Tensor::randn(&[d, 2 * d], 1.0, &mut r));
        let eb = g.constant(Tensor::randn(&[2 * d], 1.0, &mut r));
        let cls_expanded = expand_dim(x.slice_rows(0, 1).unwrap(), ew, eb).unwrap().value();
        let cw = g.constant(Tensor::randn(&[9, d, d], 1.0, &mut r));
        let cb = g.constant(Tensor::randn(&[d], 1.0, &mut r));
        let lw = g.constant(Tensor::randn(&[2, n], 1.0, &mut r));
        for (kind, w) in [
            (MergeKind::Conv, MergeWeights::Conv { w: cw, b: cb }),
            (MergeKind::AvgPool, MergeWeights::Weightless),
            (MergeKind::Linear, MergeWeights::Linear { w: lw }),
            (MergeKind::None, MergeWeights::Weightless),
        ] {
            let (y, _) = reduce_tokens(x, &spec(kind), TokenLayout::Seq1D(n), w).unwrap();
            let y = expand_dim(y, ew, eb).unwrap().value();
            assert_eq!(y.row(0), cls_expanded.row(0), "{kind}");
        }
    }

    #[test]
    fn expand_dim_identity_block_and_width() {
        let mut r = rng(5);
        let g = Graph::<f64>::new();
        let xv = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
        let w = Tensor::from_fn(&[3, 6], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
        let y = expand_dim(g.constant(xv.clone()), g.constant(w), g.constant(Tensor::zeros(&[6]))).unwrap().value();
        for i in 0..5 {
            assert_eq!(&y.row(i)[..3], xv.row(i));
            assert_eq!(&y.row(i)[3..], &[0.0; 3]);
        }
        let x96 = g.constant(Tensor::zeros(&[3, 96]));
        let w96 = g.constant(Tensor::zeros(&[96, 192]));
        let b = g.constant(Tensor::zeros(&[192]));
        assert_eq!(expand_dim(x96, w96, b).unwrap().shape(), vec![3, 192]);
        assert!(expand_dim(x96, g.constant(Tensor::zeros(&[96, 96])), b).is_err());
    }

    #[test]
    fn gradcheck_reduce_and_expand() {
        let mut r = rng(6);
        let (n, d) = (10, 3);
        let x = Tensor::<f64>::randn(&[n + 1, d], 1.0, &mut r);
        let probe = Tensor::<f64>::randn(&[4, 2 * d], 1.0, &mut r);
        let cw = Tensor::<f64>::randn(&[9, d, d], 0.5, &mut r);
        let cb = Tensor::<f64>::randn(&[d], 0.5, &mut r);
        let ew = Tensor::<f64>::randn(&[d, 2 * d], 0.5, &mut r);
        let eb = Tensor::<f64>::randn(&[2 * d], 0.5, &mut r);
        let err = gradcheck(
            &[x.clone(), cw, cb, ew.clone(), eb.clone()],
            |g, v| {
                let (y, _) = reduce_tokens(v[0], &spec(MergeKind::Conv), TokenLayout::Seq1D(n), MergeWeights::Conv { w: v[1], b: v[2] })?;
                Ok(expand_dim(y, v[3], v[4])?.mul(g.constant(probe.clone()))?.sum())
            },
            GradcheckConfig::default(),
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");

        let x2 = Tensor::<f64>::randn(&[13, d], 1.0, &mut r);
        let probe2 = Tensor::<f64>::randn(&[5, d], 1.0, &mut r);
        let err = gradcheck(
            &[x2],
            |g, v| {
                let (y, _) = reduce_tokens(v[0], &spec(MergeKind::AvgPool), TokenLayout::Grid2D { h: 3, w: 4 }, MergeWeights::Weightless)?;
                Ok(y.mul(g.constant(probe2.clone()))?.sum())
            },
            GradcheckConfig::default(),
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
