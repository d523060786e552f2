use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AttentionPolicy, BlockSpec, EncoderConfig, StemSpec};
use crate::attention::{mhsa_forward, MhsaWeights};
use crate::autodiff::{concat_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::reduction::{expand_dim, reduce_tokens, MergeKind, MergeWeights};
use crate::tensor::{Scalar, Tensor};

/// A named weight tensor. `decay` marks membership in the weight-decay set.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub decay: bool,
}

#[derive(Clone, Debug)]
struct LayerSlots {
    ln1: (usize, usize),
    attn: [usize; 8],
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Clone, Debug)]
struct TransitionSlots {
    merge: Option<(usize, Option<usize>)>,
    expand: (usize, usize),
}

#[derive(Clone, Debug)]
struct Slots {
    stem: (usize, usize),
    cls: usize,
    pos: Option<usize>,
    layers: Vec<Vec<LayerSlots>>,
    transitions: Vec<TransitionSlots>,
    norm: (usize, usize),
    head: (usize, usize),
}

struct Init<T: Scalar> {
    rng: ChaCha8Rng,
    std: f64,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Init<T> {
    fn push(&mut self, name: String, t: Tensor<T>, decay: bool) -> usize {
        self.params.push(Param {
            name,
            value: Arc::new(t),
            decay,
        });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], decay: bool) -> usize {
        let t = Tensor::trunc_normal(shape, self.std, &mut self.rng);
        self.push(name, t, decay)
    }

    fn zeros(&mut self, name: String, shape: &[usize], decay: bool) -> usize {
        self.push(name, Tensor::zeros(shape), decay)
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> (usize, usize) {
        let g = self.push(format!("{prefix}.g"), Tensor::ones(&[dim]), false);
        (g, self.zeros(format!("{prefix}.b"), &[dim], false))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.normal(format!("{prefix}.w"), &[fan_in, fan_out], true);
        (w, self.zeros(format!("{prefix}.b"), &[fan_out], true))
    }
}

/// The encoder with its weights and resolved block schedule.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: EncoderConfig,
    blocks: Vec<BlockSpec>,
    params: Vec<Param<T>>,
    slots: Slots,
}

/// Model weights recorded as leaves of one graph, aligned with [`Model::params`].
pub struct Bound<'g, T: Scalar> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    /// Wraps vars that follow the order of [`Model::params`].
    pub fn from_vars(vars: Vec<Var<'g, T>>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }

    fn at(&self, i: usize) -> Var<'g, T> {
        self.vars[i]
    }
}

/// Final CLS row `[1, D_B]` and the full token matrix `[N_B+1, D_B]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'g, T: Scalar> {
    pub cls: Var<'g, T>,
    pub tokens: Var<'g, T>,
}

impl<T: Scalar> Model<T> {
    /// Initializes every weight from `seed`: truncated normal for projections,
    /// convolutions and embeddings; ones and zeros for norm gains and offsets;
    /// zeros for biases.
    pub fn build(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let blocks = config.schedule()?;
        let red = config.reduction()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: config.init_std,
            params: Vec::new(),
        };
        let d0 = config.d0;
        let stem_w = init.normal("stem.w".into(), &config.stem.weight_shape(d0), true);
        let stem_b = init.zeros("stem.b".into(), &[d0], true);
        let cls = init.normal("cls".into(), &[1, d0], false);
        let pos = config
            .pos_embed
            .then(|| init.normal("pos".into(), &[blocks[0].tokens, d0], false));
        let mut layers = Vec::with_capacity(blocks.len());
        let mut transitions = Vec::new();
        for blk in &blocks {
            let (b, d) = (blk.index, blk.dim);
            let hidden = d * config.mlp_ratio;
            let mut per_block = Vec::with_capacity(blk.layers);
            for l in 0..blk.layers {
                let p = format!("block{b}.layer{l}");
                let ln1 = init.norm(&format!("{p}.ln1"), d);
                let q = init.linear(&format!("{p}.attn.q"), d, d);
                let k = init.linear(&format!("{p}.attn.k"), d, d);
                let v = init.linear(&format!("{p}.attn.v"), d, d);
                let o = init.linear(&format!("{p}.attn.o"), d, d);
                let ln2 = init.norm(&format!("{p}.ln2"), d);
                let fc1 = init.linear(&format!("{p}.mlp.fc1"), d, hidden);
                let fc2 = init.linear(&format!("{p}.mlp.fc2"), hidden, d);
                per_block.push(LayerSlots {
                    ln1,
                    attn: [q.0, q.1, k.0, k.1, v.0, v.1, o.0, o.1],
                    ln2,
                    fc1,
                    fc2,
                });
            }
            layers.push(per_block);
            if b + 1 < blocks.len() {
                let merge = match red.weight_shape(blk.layout, d)? {
                    None => None,
                    Some(shape) => {
                        let w = init.normal(format!("merge{b}.w"), &shape, true);
                        let bias = (config.merge == MergeKind::Conv)
                            .then(|| init.zeros(format!("merge{b}.b"), &[d], true));
                        Some((w, bias))
                    }
                };
                let expand = init.linear(&format!("expand{b}"), d, 2 * d);
                transitions.push(TransitionSlots { merge, expand });
            }
        }
        let d_last = config.final_dim();
        let norm = init.norm("norm", d_last);
        let head = init.linear("head", d_last, config.num_classes);
        Ok(Model {
            config: config.clone(),
            blocks,
            params: init.params,
            slots: Slots {
                stem: (stem_w, stem_b),
                cls,
                pos,
                layers,
                transitions,
                norm,
                head,
            },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalar weights.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same weights under a different attention policy.
    pub fn with_policy(&self, policy: AttentionPolicy) -> Result<Self> {
        let mut config = self.config.clone();
        config.policy = policy;
        let blocks = config.schedule()?;
        Ok(Model {
            config,
            blocks,
            params: self.params.clone(),
            slots: self.slots.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            blocks: self.blocks.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    decay: p.decay,
                })
                .collect(),
            slots: self.slots.clone(),
        }
    }

    /// Records all weights as differentiable leaves.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self.params.iter().map(|p| g.param(Arc::clone(&p.value))).collect(),
        }
    }

    /// Records all weights as constants, for inference.
    pub fn bind_frozen<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.constant_shared(Arc::clone(&p.value)))
                .collect(),
        }
    }

    /// Raw input to `[N_0+1, D_0]` rows with CLS first.
    pub fn stem_forward<'g>(&self, p: &Bound<'g, T>, raw: Var<'g, T>) -> Result<Var<'g, T>> {
        let expected = self.config.stem.input_shape();
        if raw.shape() != expected {
            return Err(Error::shape("stem_forward", &raw.shape(), &expected));
        }
        let (w, b) = (p.at(self.slots.stem.0), p.at(self.slots.stem.1));
        let n0 = self.blocks[0].tokens;
        let tokens = match self.config.stem {
            StemSpec::Seq1D { kernel, stride, .. } => raw.conv1d(w, stride, (kernel - 1) / 2)?,
            StemSpec::Grid2D { kernel, stride, .. } => raw
                .conv2d(w, stride, ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2))?
                .reshape(&[n0, self.config.d0])?,
        };
        let mut tokens = tokens.add_row(b)?;
        if let Some(pos) = self.slots.pos {
            tokens = tokens.add(p.at(pos))?;
        }
        concat_rows(&[p.at(self.slots.cls), tokens])
    }

    /// Layer `l` of block `b`: pre-norm attention and MLP, each with a residual.
    pub fn layer_forward<'g>(&self, p: &Bound<'g, T>, b: usize, l: usize, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let blk = &self.blocks[b];
        let s = &self.slots.layers[b][l];
        let cfg = &self.config;
        let a = s.attn.map(|i| p.at(i));
        let w = MhsaWeights {
            wq: a[0],
            bq: a[1],
            wk: a[2],
            bk: a[3],
            wv: a[4],
            bv: a[5],
            wo: a[6],
            bo: a[7],
        };
        let h = x.layer_norm(p.at(s.ln1.0), p.at(s.ln1.1), cfg.ln_eps)?;
        let x = x.add(mhsa_forward(h, &w, blk.kind, blk.heads, cfg.tau, cfg.attn_eps)?)?;
        let h = x.layer_norm(p.at(s.ln2.0), p.at(s.ln2.1), cfg.ln_eps)?;
        let m = h
            .matmul(p.at(s.fc1.0))?
            .add_row(p.at(s.fc1.1))?
            .unary(cfg.activation)
            .matmul(p.at(s.fc2.0))?
            .add_row(p.at(s.fc2.1))?;
        x.add(m)
    }

    pub fn block_forward<'g>(&self, p: &Bound<'g, T>, b: usize, mut x: Var<'g, T>) -> Result<Var<'g, T>> {
        for l in 0..self.blocks[b].layers {
            x = self.layer_forward(p, b, l, x)?;
        }
        Ok(x)
    }

    /// Token merge and width doubling after block `b`.
    pub fn transition<'g>(&self, p: &Bound<'g, T>, b: usize, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let t = self.slots.transitions.get(b).ok_or_else(|| {
            Error::Contract(format!("block {b} is the last block and has no transition"))
        })?;
        let weights = match t.merge {
            None => MergeWeights::Weightless,
            Some((w, Some(bias))) => MergeWeights::Conv {
                w: p.at(w),
                b: p.at(bias),
            },
            Some((w, None)) => MergeWeights::Linear { w: p.at(w) },
        };
        let (y, _) = reduce_tokens(x, &self.config.reduction()?, self.blocks[b].layout, weights)?;
        expand_dim(y, p.at(t.expand.0), p.at(t.expand.1))
    }

    pub fn encoder_forward<'g>(&self, p: &Bound<'g, T>, mut x: Var<'g, T>) -> Result<EncoderOutput<'g, T>> {
        for b in 0..self.blocks.len() {
            x = self.block_forward(p, b, x)?;
            if b + 1 < self.blocks.len() {
                x = self.transition(p, b, x)?;
            }
        }
        let tokens = x.layer_norm(p.at(self.slots.norm.0), p.at(self.slots.norm.1), self.config.ln_eps)?;
        Ok(EncoderOutput {
            cls: tokens.slice_rows(0, 1)?,
            tokens,
        })
    }

    /// Affine head on the CLS row: `[1, D_B]` to `[1, C]`.
    pub fn classify<'g>(&self, p: &Bound<'g, T>, cls: Var<'g, T>) -> Result<Var<'g, T>> {
        cls.matmul(p.at(self.slots.head.0))?.add_row(p.at(self.slots.head.1))
    }

    pub fn forward<'g>(&self, p: &Bound<'g, T>, raw: Var<'g, T>) -> Result<Var<'g, T>> {
        let tokens = self.stem_forward(p, raw)?;
        let out = self.encoder_forward(p, tokens)?;
        self.classify(p, out.cls)
    }

    /// Logits `[1, C]` for one input without recording gradients.
    pub fn logits(&self, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.bind_frozen(&g);
        let x = g.constant(raw.clone());
        Ok((*self.forward(&p, x)?.value()).clone())
    }

    /// Replaces the value of parameter `i`, keeping its shape.
    pub fn set_param(&mut self, i: usize, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_param", p.value.shape(), value.shape()));
        }
        p.value = Arc::new(value);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionKind, FeatureMap};
    use crate::autodiff::{GradcheckConfig, UnaryFn};
    use crate::tensor::alloc;

    fn seq(length: usize) -> StemSpec {
        StemSpec::Seq1D { length, in_channels: 2, kernel: 3, stride: 2 }
    }

    fn toy(length: usize, d0: usize) -> EncoderConfig {
        EncoderConfig::custom(vec![1, 1], d0, vec![1, 2], seq(length), 3)
    }

    fn input<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> Tensor<T> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&cfg.stem.input_shape(), 1.0, &mut r)
    }

    #[test]
    fn output_shapes_and_parameter_names() {
        let cfg = toy(40, 8);
        let m = Model::<f64>::build(&cfg, 0).unwrap();
        let g = Graph::new();
        let p = m.bind(&g);
        let x = g.constant(input(&cfg, 1));
        let tokens = m.stem_forward(&p, x).unwrap();
        assert_eq!(tokens.shape(), vec![21, 8]);
        let out = m.encoder_forward(&p, tokens).unwrap();
        assert_eq!(out.cls.shape(), vec![1, 16]);
        assert_eq!(out.tokens.shape(), vec![6, 16]);
        assert_eq!(m.classify(&p, out.cls).unwrap().shape(), vec![1, 3]);
        let names: Vec<_> = m.params().iter().map(|p| p.name.as_str()).collect();
        for n in ["stem.w", "cls", "pos", "block0.layer0.attn.q.w", "merge0.w", "merge0.b", "expand0.w", "block1.layer0.mlp.fc2.b", "norm.g", "head.w"] {
            assert!(names.contains(&n), "{n}");
        }
        assert!(!m.param("cls").unwrap().decay);
        assert!(!m.param("block0.layer0.ln1.g").unwrap().decay);
        assert!(m.param("head.b").unwrap().decay);
    }

    #[test]
    fn zero_stem_leaves_cls_and_position_rows() {
        let cfg = toy(40, 8);
        let mut m = Model::<f64>::build(&cfg, 0).unwrap();
        let i = m.params().iter().position(|p| p.name == "stem.w").unwrap();
        let shape = m.params()[i].value.shape().to_vec();
        m.set_param(i, Tensor::zeros(&shape)).unwrap();
        let g = Graph::new();
        let p = m.bind(&g);
        let x = g.constant(Tensor::zeros(&cfg.stem.input_shape()));
        let t = m.stem_forward(&p, x).unwrap().value();
        let cls = &m.param("cls").unwrap().value;
        let pos = &m.param("pos").unwrap().value;
        assert_eq!(t.row(0), cls.row(0));
        for i in 0..20 {
            assert_eq!(t.row(i + 1), pos.row(i));
        }
    }

    #[test]
    fn grid_stem_rows() {
        let stem = StemSpec::Grid2D { in_h: 16, in_w: 12, in_channels: 1, kernel: (7, 7), stride: (4, 4) };
        let cfg = EncoderConfig::custom(vec![1, 1], 8, vec![1, 1], stem, 2);
        let m = Model::<f64>::build(&cfg, 0).unwrap();
        let g = Graph::new();
        let p = m.bind_frozen(&g);
        let t = m.stem_forward(&p, g.constant(input(&cfg, 0))).unwrap();
        assert_eq!(t.shape(), vec![4 * 3 + 1, 8]);
        assert_eq!(m.logits(&input(&cfg, 0)).unwrap().shape(), &[1, 2]);
        let bad = Tensor::<f64>::zeros(&[16, 11, 1]);
        assert!(matches!(m.logits(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = toy(64, 8);
        let a = Model::<f32>::build(&cfg, 5).unwrap().logits(&input(&cfg, 2)).unwrap();
        let b = Model::<f32>::build(&cfg, 5).unwrap().logits(&input(&cfg, 2)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = Model::<f32>::build(&cfg, 6).unwrap().logits(&input(&cfg, 2)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn mixed_equals_alldot_on_short_inputs() {
        // 6 tokens vs width 16: every block picks dot attention
        let cfg = EncoderConfig::custom(vec![1, 1], 16, vec![1, 2], seq(12), 3);
        let m = Model::<f64>::build(&cfg, 3).unwrap();
        assert!(m.blocks().iter().all(|b| b.kind == AttentionKind::Dot));
        let dot = m.with_policy(AttentionPolicy::AllDot).unwrap();
        let x = input(&cfg, 4);
        assert_eq!(m.logits(&x).unwrap().data(), dot.logits(&x).unwrap().data());
        let approx = m.with_policy(AttentionPolicy::AllApprox).unwrap();
        assert_ne!(m.logits(&x).unwrap().data(), approx.logits(&x).unwrap().data());
    }

    #[test]
    fn gradients_reach_every_parameter() {
        for policy in [AttentionPolicy::Mixed, AttentionPolicy::AllDot, AttentionPolicy::AllApprox] {
            for merge in [MergeKind::Conv, MergeKind::AvgPool, MergeKind::Linear] {
                let mut cfg = EncoderConfig::custom(vec![1, 1, 1], 8, vec![1, 2, 2], seq(64), 3);
                cfg.policy = policy;
                cfg.merge = merge;
                let m = Model::<f64>::build(&cfg, 9).unwrap();
                let g = Graph::new();
                let p = m.bind(&g);
                let probe = g.constant(Tensor::from_fn(&[1, 3], |i| [1.0, -2.0, 0.5][i]));
                let logits = m.forward(&p, g.constant(input(&cfg, 1))).unwrap();
                let grads = g.backward(logits.mul(probe).unwrap().sum()).unwrap();
                for (param, &v) in m.params().iter().zip(p.vars()) {
                    let gr = grads.get(v);
                    assert!(gr.all_finite());
                    assert!(gr.max_abs() > 0.0, "{policy} {merge}: dead gradient for {}", param.name);
                }
            }
        }
    }

    #[test]
    fn permuting_tokens_before_block_one() {
        let mut cfg = EncoderConfig::custom(vec![2, 1], 8, vec![2, 2], seq(40), 3);
        cfg.pos_embed = false;
        let m = Model::<f64>::build(&cfg, 1).unwrap();
        let g = Graph::new();
        let p = m.bind_frozen(&g);
        let tokens = m.stem_forward(&p, g.constant(input(&cfg, 2))).unwrap().value();
        let n = tokens.shape()[0] - 1;
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let permuted = Tensor::from_fn(tokens.shape(), |i| {
            let (r, c) = (i / 8, i % 8);
            let src = if r == 0 { 0 } else { perm[r - 1] + 1 };
            tokens.data()[src * 8 + c]
        });
        for policy in [AttentionPolicy::AllDot, AttentionPolicy::AllApprox] {
            let mm = m.with_policy(policy).unwrap();
            let a = mm.block_forward(&p, 0, g.constant((*tokens).clone())).unwrap().value();
            let b = mm.block_forward(&p, 0, g.constant(permuted.clone())).unwrap().value();
            for c in 0..8 {
                assert!((a.row(0)[c] - b.row(0)[c]).abs() < 1e-12);
            }
            for (i, &src) in perm.iter().enumerate() {
                for c in 0..8 {
                    assert!((b.row(i + 1)[c] - a.row(src + 1)[c]).abs() < 1e-12);
                }
            }
        }
    }

    /// Composes the public module operations by hand, without the model's
    /// own wiring, and compares logits bit for bit.
    #[test]
    fn forward_matches_hand_composition() {
        use crate::reduction::ReductionSpec;
        let cfg = toy(24, 8);
        let m = Model::<f64>::build(&cfg, 2).unwrap();
        let x = input::<f64>(&cfg, 3);
        let g = Graph::new();
        let w = |name: &str| g.constant((*m.param(name).unwrap().value).clone());
        fn layer<'g>(w: &dyn Fn(&str) -> Var<'g, f64>, cfg: &EncoderConfig, x: Var<'g, f64>, b: usize, kind: AttentionKind, heads: usize) -> Var<'g, f64> {
            let pre = format!("block{b}.layer0");
            let n = |s: &str| w(&format!("{pre}.{s}"));
            let mw = MhsaWeights {
                wq: n("attn.q.w"), bq: n("attn.q.b"), wk: n("attn.k.w"), bk: n("attn.k.b"),
                wv: n("attn.v.w"), bv: n("attn.v.b"), wo: n("attn.o.w"), bo: n("attn.o.b"),
            };
            let h = x.layer_norm(n("ln1.g"), n("ln1.b"), 1e-5).unwrap();
            let x = x.add(mhsa_forward(h, &mw, kind, heads, cfg.tau, cfg.attn_eps).unwrap()).unwrap();
            let h = x.layer_norm(n("ln2.g"), n("ln2.b"), 1e-5).unwrap();
            let f = h.matmul(n("mlp.fc1.w")).unwrap().add_row(n("mlp.fc1.b")).unwrap().softplus();
            x.add(f.matmul(n("mlp.fc2.w")).unwrap().add_row(n("mlp.fc2.b")).unwrap()).unwrap()
        }
        let t = g.constant(x.clone()).conv1d(w("stem.w"), 2, 1).unwrap().add_row(w("stem.b")).unwrap();
        let t = concat_rows(&[w("cls"), t.add(w("pos")).unwrap()]).unwrap();
        // 12 tokens < 8 dims is false, so block 0 is approximate; 3 tokens < 16 is dot
        let t = layer(&w, &cfg, t, 0, AttentionKind::Approx(FeatureMap::EluPlusOne), 1);
        let red = ReductionSpec::new(MergeKind::Conv, 4).unwrap();
        let (t, _) = reduce_tokens(t, &red, m.blocks()[0].layout, MergeWeights::Conv { w: w("merge0.w"), b: w("merge0.b") }).unwrap();
        let t = expand_dim(t, w("expand0.w"), w("expand0.b")).unwrap();
        let t = layer(&w, &cfg, t, 1, AttentionKind::Dot, 2);
        let t = t.layer_norm(w("norm.g"), w("norm.b"), 1e-5).unwrap();
        let logits = t.slice_rows(0, 1).unwrap().matmul(w("head.w")).unwrap().add_row(w("head.b")).unwrap();
        assert_eq!(logits.value().data(), m.logits(&x).unwrap().data());
    }

    #[test]
    fn gradcheck_two_block_encoder() {
        let mut cfg = EncoderConfig::custom(vec![1, 1], 4, vec![1, 2], seq(16), 2);
        cfg.activation = UnaryFn::Softplus;
        cfg.init_std = 0.5;
        let m = Model::<f64>::build(&cfg, 4).unwrap();
        let x = input::<f64>(&cfg, 5);
        let mut inputs = vec![x];
        inputs.extend(m.params().iter().map(|p| (*p.value).clone()));
        let probe = Tensor::<f64>::from_fn(&[1, 2], |i| [0.7, -1.3][i]);
        let report = crate::autodiff::gradcheck_inputs(
            &inputs,
            |g, v| {
                let p = Bound { vars: v[1..].to_vec() };
                m.forward(&p, v[0])?.mul(g.constant(probe.clone()))
                    .map(|y| y.sum())
            },
            GradcheckConfig::default(),
        )
        .unwrap();
        for (i, c) in report.iter().enumerate() {
            let name = if i == 0 { "input" } else { &m.params()[i - 1].name };
            assert!(c.rel_error <= 1e-4, "{name}: {c:?}");
        }
    }

    #[test]
    fn approx_blocks_allocate_less_than_dot_blocks() {
        let cfg = EncoderConfig::custom(vec![1], 8, vec![1], StemSpec::Seq1D { length: 512, in_channels: 1, kernel: 1, stride: 1 }, 2);
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        let x = input::<f32>(&cfg, 0);
        let peak = |policy| {
            let mm = m.with_policy(policy).unwrap();
            alloc::track(|| mm.logits(&x).unwrap()).1.largest_buffer
        };
        assert!(peak(AttentionPolicy::Mixed) < 512 * 64);
        assert!(peak(AttentionPolicy::AllDot) >= 513 * 513);
    }
}
