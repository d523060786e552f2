//! Self-check suites behind the `gradcheck` and `oracle` subcommands.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    approx_attention, approx_attention_var, dot_attention, dot_attention_var, mhsa_forward, naive_approx_oracle,
    AttentionInputs, AttentionKind, FeatureMap, MhsaWeights, TauRule, DEFAULT_EPS,
};
use crate::autodiff::{concat_cols, concat_rows, gradcheck, gradcheck_inputs, Graph, GradcheckConfig, UnaryFn, Var};
use crate::encoder::{Bound, EncoderConfig, Model, StemSpec};
use crate::error::{Error, Result};
use crate::reduction::{expand_dim, reduce_tokens, MergeKind, MergeWeights, ReductionSpec, TokenLayout};
use crate::tensor::Tensor;
use crate::train::{cross_entropy_ls, weighted_bce};

/// Gradient checks pass at or below this relative error.
pub const GRAD_TOL: f64 = 1e-4;

/// Oracle comparisons pass at or below this relative error.
pub const ORACLE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "ok  " } else { "FAIL" };
        write!(f, "{verdict} {:<36} {:.3e} (tol {:.0e})", self.name, self.error, self.tolerance)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    All,
    /// Every primitive graph op and the two losses.
    Ops,
    Attention,
    Reduction,
    /// A full two-block toy encoder, every parameter checked.
    Encoder,
}

impl FromStr for Module {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Module::All),
            "ops" => Ok(Module::Ops),
            "attention" => Ok(Module::Attention),
            "reduction" => Ok(Module::Reduction),
            "encoder" => Ok(Module::Encoder),
            _ => Err(Error::Config(format!("unknown module `{s}` (all, ops, attention, reduction, encoder)"))),
        }
    }
}

fn probe<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let p = Tensor::randn(&y.shape(), 1.0, &mut r);
    Ok(y.mul(g.constant(p))?.sum())
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<Check>,
}

impl Suite {
    fn randn(&mut self, shape: &[usize], std: f64) -> Tensor<f64> {
        Tensor::randn(shape, std, &mut self.rng)
    }

    fn check<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
    {
        let seed = self.rng.random();
        let err = gradcheck(inputs, |g, v| probe(g, f(g, v)?, seed), GradcheckConfig::default())?;
        self.out.push(Check {
            name: name.to_string(),
            error: err,
            tolerance: GRAD_TOL,
        });
        Ok(())
    }

    fn check_scalar<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
    {
        let err = gradcheck(inputs, f, GradcheckConfig::default())?;
        self.out.push(Check {
            name: name.to_string(),
            error: err,
            tolerance: GRAD_TOL,
        });
        Ok(())
    }

    fn ops(&mut self) -> Result<()> {
        let (a, b) = (self.randn(&[3, 4], 1.0), self.randn(&[4, 5], 1.0));
        let bt = self.randn(&[5, 4], 1.0);
        let at = self.randn(&[4, 3], 1.0);
        self.check("matmul", &[a.clone(), b.clone()], |_, v| v[0].matmul(v[1]))?;
        self.check("matmul_nt", &[a.clone(), bt], |_, v| v[0].matmul_nt(v[1]))?;
        self.check("matmul_tn", &[at, b], |_, v| v[0].matmul_tn(v[1]))?;
        let (x, y) = (self.randn(&[3, 4], 1.0), self.randn(&[3, 4], 1.0));
        let row = self.randn(&[4], 1.0);
        self.check("add", &[x.clone(), y.clone()], |_, v| v[0].add(v[1]))?;
        self.check("add_row", &[x.clone(), row], |_, v| v[0].add_row(v[1]))?;
        self.check("mul", &[x.clone(), y.clone()], |_, v| v[0].mul(v[1]))?;
        self.check("scale", &[x.clone()], |_, v| Ok(v[0].scale(-0.7)))?;
        for (name, f) in [
            ("relu", UnaryFn::Relu),
            ("softplus", UnaryFn::Softplus),
            ("elu_plus_one", UnaryFn::EluPlusOne),
            ("exp", UnaryFn::Exp),
        ] {
            self.check(name, &[x.clone()], move |_, v| Ok(v[0].unary(f)))?;
        }
        self.check("softmax_rows", &[x.clone()], |_, v| v[0].softmax_rows())?;
        let (gamma, beta) = (self.randn(&[4], 1.0), self.randn(&[4], 1.0));
        self.check("layer_norm", &[x.clone(), gamma, beta], |_, v| v[0].layer_norm(v[1], v[2], 1e-5))?;
        let (s1, w1) = (self.randn(&[11, 2], 1.0), self.randn(&[5, 2, 3], 0.5));
        self.check("conv1d", &[s1.clone(), w1], |_, v| v[0].conv1d(v[1], 2, 2))?;
        self.check("avg_pool1d", &[s1], |_, v| v[0].avg_pool1d(9, 4, 4))?;
        let (s2, w2) = (self.randn(&[5, 6, 2], 1.0), self.randn(&[3, 3, 2, 3], 0.5));
        self.check("conv2d", &[s2.clone(), w2], |_, v| v[0].conv2d(v[1], (2, 2), (1, 1)))?;
        self.check("avg_pool2d", &[s2], |_, v| v[0].avg_pool2d((3, 3), (2, 2), (1, 1)))?;
        self.check("slice_cols", &[x.clone()], |_, v| v[0].slice_cols(1, 2))?;
        self.check("slice_rows", &[x.clone()], |_, v| v[0].slice_rows(1, 2))?;
        self.check("reshape", &[x.clone()], |_, v| v[0].reshape(&[2, 6]))?;
        self.check("concat_cols", &[x.clone(), y.clone()], |_, v| concat_cols(&[v[0], v[1]]))?;
        self.check("concat_rows", &[x.clone(), y], |_, v| concat_rows(&[v[0], v[1]]))?;
        self.check_scalar("sum", &[x.clone()], |_, v| Ok(v[0].sum()))?;
        self.check_scalar("mean", &[x.clone()], |_, v| Ok(v[0].mean()))?;
        let logits = self.randn(&[3, 4], 2.0);
        self.check_scalar("cross_entropy_ls", &[logits.clone()], |_, v| cross_entropy_ls(v[0], &[0, 3, 1], 0.1))?;
        let t = Tensor::from_fn(&[3, 4], |i| ((i * 5) % 3 == 0) as u8 as f64);
        self.check_scalar("weighted_bce", &[logits], move |_, v| weighted_bce(v[0], &t, 0.5))
    }

    fn attention(&mut self) -> Result<()> {
        let (n, d, h) = (7, 6, 2);
        let (q, k, v) = (self.randn(&[n, d], 1.0), self.randn(&[n, d], 1.0), self.randn(&[n, d], 1.0));
        let qkv = [q, k, v];
        self.check("dot_attention", &qkv, |_, x| dot_attention_var(x[0], x[1], x[2], h))?;
        for psi in FeatureMap::ALL {
            let name = format!("approx_attention[{}]", psi.name());
            self.check(&name, &qkv, move |_, x| {
                approx_attention_var(x[0], x[1], x[2], h, psi, (n as f64).sqrt(), DEFAULT_EPS)
            })?;
        }
        let x = self.randn(&[n, d], 1.0);
        let mut inputs = vec![x];
        for _ in 0..4 {
            inputs.push(self.randn(&[d, d], 0.4));
            inputs.push(self.randn(&[d], 0.2));
        }
        for kind in [AttentionKind::Dot, AttentionKind::Approx(FeatureMap::EluPlusOne)] {
            let name = format!("mhsa[{}]", if kind.is_dot() { "dot" } else { "approx" });
            self.check(&name, &inputs, move |_, x| {
                let w = MhsaWeights {
                    wq: x[1],
                    bq: x[2],
                    wk: x[3],
                    bk: x[4],
                    wv: x[5],
                    bv: x[6],
                    wo: x[7],
                    bo: x[8],
                };
                mhsa_forward(x[0], &w, kind, h, TauRule::SqrtTokens, DEFAULT_EPS)
            })?;
        }
        Ok(())
    }

    fn reduction(&mut self) -> Result<()> {
        let d = 3;
        let x1 = self.randn(&[11, d], 1.0);
        let x2 = self.randn(&[13, d], 1.0);
        let (ew, eb) = (self.randn(&[d, 2 * d], 0.5), self.randn(&[2 * d], 0.5));
        let layouts = [TokenLayout::Seq1D(10), TokenLayout::Grid2D { h: 3, w: 4 }];
        for kind in [MergeKind::Conv, MergeKind::AvgPool, MergeKind::Linear, MergeKind::None] {
            let spec = ReductionSpec::new(kind, if kind == MergeKind::Linear { 2 } else { 4 })?;
            for (layout, x) in layouts.iter().zip([&x1, &x2]) {
                let mut inputs = vec![x.clone(), ew.clone(), eb.clone()];
                if let Some(shape) = spec.weight_shape(*layout, d)? {
                    inputs.push(self.randn(&shape, 0.5));
                    if kind == MergeKind::Conv {
                        inputs.push(self.randn(&[d], 0.5));
                    }
                }
                let layout = *layout;
                let name = format!("reduce+expand[{kind},{layout}]");
                self.check(&name, &inputs, move |_, v| {
                    let w = match kind {
                        MergeKind::Conv => MergeWeights::Conv { w: v[3], b: v[4] },
                        MergeKind::Linear => MergeWeights::Linear { w: v[3] },
                        _ => MergeWeights::Weightless,
                    };
                    let (y, _) = reduce_tokens(v[0], &spec, layout, w)?;
                    expand_dim(y, v[1], v[2])
                })?;
            }
        }
        Ok(())
    }

    fn encoder(&mut self) -> Result<()> {
        let stem = StemSpec::Seq1D {
            length: 16,
            in_channels: 2,
            kernel: 3,
            stride: 2,
        };
        let mut cfg = EncoderConfig::custom(vec![1, 1], 4, vec![1, 2], stem, 2);
        cfg.init_std = 0.5;
        let model = Model::<f64>::build(&cfg, self.rng.random())?;
        let mut inputs = vec![self.randn(&cfg.stem.input_shape(), 1.0)];
        inputs.extend(model.params().iter().map(|p| (*p.value).clone()));
        let seed = self.rng.random();
        let report = gradcheck_inputs(
            &inputs,
            |g, v| probe(g, model.forward(&Bound::from_vars(v[1..].to_vec()), v[0])?, seed),
            GradcheckConfig::default(),
        )?;
        for (i, c) in report.iter().enumerate() {
            let name = if i == 0 { "input".to_string() } else { model.params()[i - 1].name.clone() };
            self.out.push(Check {
                name: format!("encoder.{name}"),
                error: c.rel_error,
                tolerance: GRAD_TOL,
            });
        }
        Ok(())
    }
}

/// Central-difference checks (f64, `h = 1e-5`) for the chosen module.
pub fn gradcheck_suite(module: Module, seed: u64) -> Result<Vec<Check>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    if matches!(module, Module::All | Module::Ops) {
        s.ops()?;
    }
    if matches!(module, Module::All | Module::Attention) {
        s.attention()?;
    }
    if matches!(module, Module::All | Module::Reduction) {
        s.reduction()?;
    }
    if matches!(module, Module::All | Module::Encoder) {
        s.encoder()?;
    }
    Ok(s.out)
}

/// Textbook exact attention: per row, exponentiate shifted scores, normalize, weight V.
fn dot_loop(inp: &AttentionInputs<f64>) -> Tensor<f64> {
    let (h, n, d) = inp.dims();
    let (q, k, v) = (inp.q.data(), inp.k.data(), inp.v.data());
    let mut out = vec![0.0; h * n * d];
    for hh in 0..h {
        let base = hh * n * d;
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|a| q[base + i * d + a] * k[base + j * d + a]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for b in 0..d {
                out[base + i * d + b] = (0..n).map(|j| e[j] * v[base + j * d + b]).sum::<f64>() / z;
            }
        }
    }
    Tensor::new(&[h, n, d], out).expect("shape")
}

/// Direct seven-deep loop for a 1D cross-correlation with zero padding.
fn conv1d_loop(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin) = (x.shape()[0], x.shape()[1]);
    let (k, cout) = (w.shape()[0], w.shape()[2]);
    let out_n = (n + 2 * pad - k) / stride + 1;
    Tensor::from_fn(&[out_n, cout], |idx| {
        let (o, c) = (idx / cout, idx % cout);
        let mut acc = 0.0;
        for t in 0..k {
            let pos = (o * stride + t) as isize - pad as isize;
            if pos < 0 || pos as usize >= n {
                continue;
            }
            for ci in 0..cin {
                acc += x.data()[pos as usize * cin + ci] * w.data()[(t * cin + ci) * cout + c];
            }
        }
        acc
    })
}

fn relative_max(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.norm_rel_diff(b)
}

/// Randomized equivalence suites: approximate attention against the
/// materialized kernel-matrix form for every feature map, `τ`-invariance,
/// exact attention against a loop oracle, and the stem convolution against a
/// direct loop. Each check reports the worst relative error over `trials`.
pub fn oracle_suite(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = |name: String, errors: Vec<f64>| Check {
        name,
        error: errors.into_iter().fold(0.0, f64::max),
        tolerance: ORACLE_TOL,
    };
    let mut out = Vec::new();
    let draw = |rng: &mut ChaCha8Rng, tau: Option<f64>| -> Result<AttentionInputs<f64>> {
        let (n, d) = (rng.random_range(1..=64), rng.random_range(1..=16));
        let t = tau.unwrap_or((n as f64).sqrt());
        AttentionInputs::new(
            Tensor::randn(&[1, n, d], 1.0, rng),
            Tensor::randn(&[1, n, d], 1.0, rng),
            Tensor::randn(&[1, n, d], 1.0, rng),
            t,
            DEFAULT_EPS,
        )
    };
    for psi in FeatureMap::ALL {
        let mut errs = Vec::with_capacity(trials);
        for _ in 0..trials {
            let inp = draw(&mut rng, None)?;
            errs.push(relative_max(&approx_attention(&inp, psi)?, &naive_approx_oracle(&inp, psi)?));
        }
        out.push(worst(format!("approx_vs_materialized[{}]", psi.name()), errs));
    }
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let base = draw(&mut rng, Some(1.0))?;
        let n = base.dims().1 as f64;
        let psi = FeatureMap::ALL[rng.random_range(0..3)];
        let y1 = approx_attention(&base, psi)?;
        for tau in [n.sqrt(), 10.0 * n.sqrt()] {
            let inp = AttentionInputs { tau, ..base.clone() };
            errs.push(relative_max(&y1, &approx_attention(&inp, psi)?));
        }
    }
    out.push(worst("tau_invariance".into(), errs));
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let inp = draw(&mut rng, None)?;
        errs.push(relative_max(&dot_attention(&inp)?, &dot_loop(&inp)));
    }
    out.push(worst("dot_vs_loop".into(), errs));
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (n, cin, cout) = (rng.random_range(9..80), rng.random_range(1..4), rng.random_range(1..5));
        let (k, stride) = ([1, 3, 5, 9][rng.random_range(0..4)], rng.random_range(1..5));
        let x = Tensor::randn(&[n, cin], 1.0, &mut rng);
        let w = Tensor::randn(&[k, cin, cout], 1.0, &mut rng);
        let g = Graph::<f64>::new();
        let y = g.constant(x.clone()).conv1d(g.constant(w.clone()), stride, (k - 1) / 2)?.value();
        errs.push(relative_max(&y, &conv1d_loop(&x, &w, stride, (k - 1) / 2)));
    }
    out.push(worst("conv1d_vs_loop".into(), errs));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for c in gradcheck_suite(Module::All, 1).unwrap() {
            assert!(c.passed(), "{c}");
        }
        let checks = oracle_suite(20, 2).unwrap();
        assert_eq!(checks.len(), 6);
        for c in checks {
            assert!(c.passed(), "{c}");
        }
        assert!("bogus".parse::<Module>().is_err());
    }
}
