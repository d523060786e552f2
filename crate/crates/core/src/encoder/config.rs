use std::fmt;
use std::str::FromStr;

use crate::attention::{select_attention, AttentionKind, FeatureMap, TauRule};
use crate::autodiff::UnaryFn;
use crate::error::{Error, Result};
use crate::manifest::{join, Manifest};
use crate::reduction::{MergeKind, ReductionSpec, TokenLayout};
use crate::tensor::kernels::window_out_len;

pub const SMALL_LAYERS: [usize; 4] = [1, 2, 11, 2];
pub const BASE_LAYERS: [usize; 4] = [1, 3, 16, 3];
pub const STANDARD_HEADS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Small,
    Base,
    Custom,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Custom => "custom",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Variant::Small),
            "base" => Ok(Variant::Base),
            "custom" => Ok(Variant::Custom),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionPolicy {
    /// Per block, whichever of the two attentions has the smaller matrix.
    #[default]
    Mixed,
    AllDot,
    AllApprox,
}

impl fmt::Display for AttentionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionPolicy::Mixed => "mixed",
            AttentionPolicy::AllDot => "alldot",
            AttentionPolicy::AllApprox => "allapprox",
        })
    }
}

impl FromStr for AttentionPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(AttentionPolicy::Mixed),
            "alldot" => Ok(AttentionPolicy::AllDot),
            "allapprox" => Ok(AttentionPolicy::AllApprox),
            _ => Err(Error::Config(format!("unknown attention policy `{s}`"))),
        }
    }
}

/// Convolutional stem. Padding is `(k-1)/2` per axis, so kernels are odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemSpec {
    /// Input `[length, in_channels]`.
    Seq1D {
        length: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Input `[in_h, in_w, in_channels]`.
    Grid2D {
        in_h: usize,
        in_w: usize,
        in_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
}

impl StemSpec {
    pub fn in_channels(&self) -> usize {
        match *self {
            StemSpec::Seq1D { in_channels, .. } | StemSpec::Grid2D { in_channels, .. } => in_channels,
        }
    }

    /// Expected raw input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            StemSpec::Seq1D { length, in_channels, .. } => vec![length, in_channels],
            StemSpec::Grid2D { in_h, in_w, in_channels, .. } => vec![in_h, in_w, in_channels],
        }
    }

    pub fn weight_shape(&self, d0: usize) -> Vec<usize> {
        match *self {
            StemSpec::Seq1D { in_channels, kernel, .. } => vec![kernel, in_channels, d0],
            StemSpec::Grid2D { in_channels, kernel, .. } => vec![kernel.0, kernel.1, in_channels, d0],
        }
    }

    fn validate(&self) -> Result<()> {
        let axes: Vec<(usize, usize)> = match *self {
            StemSpec::Seq1D { kernel, stride, .. } => vec![(kernel, stride)],
            StemSpec::Grid2D { kernel, stride, .. } => vec![(kernel.0, stride.0), (kernel.1, stride.1)],
        };
        if self.in_channels() == 0 {
            return Err(Error::Config("stem needs at least one input channel".into()));
        }
        for (k, s) in axes {
            if s == 0 || k < s {
                return Err(Error::Config(format!(
                    "stem kernel {k} must be >= stride {s} >= 1"
                )));
            }
            if k % 2 == 0 {
                return Err(Error::Config(format!("stem kernel {k} must be odd")));
            }
        }
        Ok(())
    }

    /// Token layout produced by the stem.
    pub fn out_layout(&self) -> Result<TokenLayout> {
        self.validate()?;
        match *self {
            StemSpec::Seq1D { length, kernel, stride, .. } => Ok(TokenLayout::Seq1D(window_out_len(
                "stem", length, kernel, stride, (kernel - 1) / 2,
            )?)),
            StemSpec::Grid2D { in_h, in_w, kernel, stride, .. } => Ok(TokenLayout::Grid2D {
                h: window_out_len("stem", in_h, kernel.0, stride.0, (kernel.0 - 1) / 2)?,
                w: window_out_len("stem", in_w, kernel.1, stride.1, (kernel.1 - 1) / 2)?,
            }),
        }
    }

    /// Same stem with the input resized so that it produces `tokens` tokens.
    /// Grids keep their token height and stretch along the width.
    pub fn with_tokens(&self, tokens: usize) -> Result<StemSpec> {
        if tokens == 0 {
            return Err(Error::Config("token count must be positive".into()));
        }
        match *self {
            StemSpec::Seq1D { in_channels, kernel, stride, .. } => Ok(StemSpec::Seq1D {
                length: tokens * stride,
                in_channels,
                kernel,
                stride,
            }),
            StemSpec::Grid2D { in_h, in_channels, kernel, stride, .. } => {
                let TokenLayout::Grid2D { h, .. } = self.out_layout()? else {
                    unreachable!("grid stems yield grid layouts")
                };
                if tokens % h != 0 {
                    return Err(Error::Config(format!(
                        "{tokens} tokens do not tile a grid of height {h}"
                    )));
                }
                Ok(StemSpec::Grid2D {
                    in_h,
                    in_w: (tokens / h) * stride.1,
                    in_channels,
                    kernel,
                    stride,
                })
            }
        }
    }
}

/// Resolved shape and attention choice of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub index: usize,
    /// Tokens excluding CLS.
    pub tokens: usize,
    pub layout: TokenLayout,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub kind: AttentionKind,
}

impl BlockSpec {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub variant: Variant,
    /// Layers per block.
    pub layers: Vec<usize>,
    pub d0: usize,
    pub nu: usize,
    pub heads: Vec<usize>,
    pub stem: StemSpec,
    pub merge: MergeKind,
    pub policy: AttentionPolicy,
    pub psi: FeatureMap,
    pub mlp_ratio: usize,
    pub activation: UnaryFn,
    pub num_classes: usize,
    pub multilabel: bool,
    pub pos_embed: bool,
    pub tau: TauRule,
    pub attn_eps: f64,
    pub ln_eps: f64,
    pub init_std: f64,
}

/// Every key read by [`EncoderConfig::from_manifest`].
pub const MANIFEST_KEYS: &[&str] = &[
    "variant", "layers", "d0", "nu", "heads", "stem", "stem.length", "stem.in_h", "stem.in_w",
    "stem.in_channels", "stem.kernel", "stem.stride", "merge", "policy", "psi", "mlp_ratio",
    "activation", "num_classes", "multilabel", "pos_embed", "tau", "attn_eps", "ln_eps",
    "init_std",
];

impl EncoderConfig {
    fn with_layers(variant: Variant, layers: Vec<usize>, d0: usize, heads: Vec<usize>, stem: StemSpec, num_classes: usize) -> Self {
        EncoderConfig {
            variant,
            layers,
            d0,
            nu: 4,
            heads,
            stem,
            merge: MergeKind::Conv,
            policy: AttentionPolicy::Mixed,
            psi: FeatureMap::EluPlusOne,
            mlp_ratio: 4,
            activation: UnaryFn::Softplus,
            num_classes,
            multilabel: false,
            pos_embed: true,
            tau: TauRule::SqrtTokens,
            attn_eps: crate::attention::DEFAULT_EPS,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    pub fn small(stem: StemSpec, num_classes: usize) -> Self {
        Self::with_layers(Variant::Small, SMALL_LAYERS.to_vec(), 96, STANDARD_HEADS.to_vec(), stem, num_classes)
    }

    pub fn base(stem: StemSpec, num_classes: usize) -> Self {
        Self::with_layers(Variant::Base, BASE_LAYERS.to_vec(), 96, STANDARD_HEADS.to_vec(), stem, num_classes)
    }

    pub fn custom(layers: Vec<usize>, d0: usize, heads: Vec<usize>, stem: StemSpec, num_classes: usize) -> Self {
        Self::with_layers(Variant::Custom, layers, d0, heads, stem, num_classes)
    }

    pub fn blocks(&self) -> usize {
        self.layers.len()
    }

    pub fn total_layers(&self) -> usize {
        self.layers.iter().sum()
    }

    pub fn dim(&self, b: usize) -> usize {
        self.d0 << b
    }

    pub fn final_dim(&self) -> usize {
        self.dim(self.blocks() - 1)
    }

    pub fn reduction(&self) -> Result<ReductionSpec> {
        ReductionSpec::new(self.merge, self.nu)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.blocks();
        if b == 0 || b != self.heads.len() {
            return Err(Error::Config(format!(
                "{} layer counts but {} head counts",
                b,
                self.heads.len()
            )));
        }
        let expected = match self.variant {
            Variant::Small => Some(SMALL_LAYERS),
            Variant::Base => Some(BASE_LAYERS),
            Variant::Custom => None,
        };
        if let Some(m) = expected {
            if self.layers != m {
                return Err(Error::Config(format!(
                    "{} variant has layers {m:?}, got {:?}",
                    self.variant, self.layers
                )));
            }
        }
        if self.d0 == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(Error::Config("d0, mlp_ratio and num_classes must be positive".into()));
        }
        if b >= usize::BITS as usize || self.d0.checked_shl(b as u32 - 1).is_none() {
            return Err(Error::Config("too many blocks for the embedding width".into()));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.dim(i) % h != 0 {
                return Err(Error::Config(format!(
                    "block {i}: {h} heads do not divide dimension {}",
                    self.dim(i)
                )));
            }
        }
        if !(self.attn_eps > 0.0 && self.ln_eps > 0.0 && self.init_std >= 0.0) {
            return Err(Error::Config("eps values must be positive and init_std nonnegative".into()));
        }
        if let TauRule::Fixed(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("tau must be a positive number, got {t}")));
            }
        }
        self.reduction()?;
        Ok(())
    }

    /// Per-block token counts, widths and attention kinds.
    pub fn schedule(&self) -> Result<Vec<BlockSpec>> {
        self.validate()?;
        let red = self.reduction()?;
        let mut layout = self.stem.out_layout()?;
        let mut blocks = Vec::with_capacity(self.blocks());
        for b in 0..self.blocks() {
            if b > 0 {
                layout = red.out_layout(layout)?;
            }
            blocks.push(BlockSpec {
                index: b,
                tokens: layout.tokens(),
                layout,
                dim: self.dim(b),
                layers: self.layers[b],
                heads: self.heads[b],
                kind: AttentionKind::Dot,
            });
        }
        let kinds = attention_schedule(self.policy, self.psi, &blocks);
        for (blk, kind) in blocks.iter_mut().zip(kinds) {
            blk.kind = kind;
        }
        Ok(blocks)
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("variant", self.variant);
        m.set("layers", join(&self.layers));
        m.set("d0", self.d0);
        m.set("nu", self.nu);
        m.set("heads", join(&self.heads));
        match self.stem {
            StemSpec::Seq1D { length, in_channels, kernel, stride } => {
                m.set("stem", "seq1d");
                m.set("stem.length", length);
                m.set("stem.in_channels", in_channels);
                m.set("stem.kernel", kernel);
                m.set("stem.stride", stride);
            }
            StemSpec::Grid2D { in_h, in_w, in_channels, kernel, stride } => {
                m.set("stem", "grid2d");
                m.set("stem.in_h", in_h);
                m.set("stem.in_w", in_w);
                m.set("stem.in_channels", in_channels);
                m.set("stem.kernel", format!("{},{}", kernel.0, kernel.1));
                m.set("stem.stride", format!("{},{}", stride.0, stride.1));
            }
        }
        m.set("merge", self.merge);
        m.set("policy", self.policy);
        m.set("psi", self.psi);
        m.set("mlp_ratio", self.mlp_ratio);
        m.set("activation", activation_name(self.activation));
        m.set("num_classes", self.num_classes);
        m.set("multilabel", self.multilabel);
        m.set("pos_embed", if self.pos_embed { "learned" } else { "none" });
        m.set(
            "tau",
            match self.tau {
                TauRule::SqrtTokens => "sqrt_tokens".to_string(),
                TauRule::Fixed(t) => format!("{t:?}"),
            },
        );
        m.set("attn_eps", format!("{:?}", self.attn_eps));
        m.set("ln_eps", format!("{:?}", self.ln_eps));
        m.set("init_std", format!("{:?}", self.init_std));
        m
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let variant: Variant = m.get_or("variant", Variant::Custom)?;
        let stem = match m.get("stem").unwrap_or("seq1d") {
            "seq1d" => StemSpec::Seq1D {
                length: m.require("stem.length")?,
                in_channels: m.get_or("stem.in_channels", 1)?,
                kernel: m.get_or("stem.kernel", 9)?,
                stride: m.get_or("stem.stride", 1)?,
            },
            "grid2d" => StemSpec::Grid2D {
                in_h: m.require("stem.in_h")?,
                in_w: m.require("stem.in_w")?,
                in_channels: m.get_or("stem.in_channels", 1)?,
                kernel: pair(m, "stem.kernel", (7, 7))?,
                stride: pair(m, "stem.stride", (4, 4))?,
            },
            other => return Err(Error::Config(format!("unknown stem `{other}`"))),
        };
        let num_classes = m.require("num_classes")?;
        let mut cfg = match variant {
            Variant::Small => Self::small(stem, num_classes),
            Variant::Base => Self::base(stem, num_classes),
            Variant::Custom => Self::custom(
                m.list("layers")?.ok_or_else(|| Error::Config("custom variant needs `layers`".into()))?,
                96,
                STANDARD_HEADS.to_vec(),
                stem,
                num_classes,
            ),
        };
        if let Some(layers) = m.list("layers")? {
            cfg.layers = layers;
        }
        if let Some(heads) = m.list("heads")? {
            cfg.heads = heads;
        }
        cfg.d0 = m.get_or("d0", cfg.d0)?;
        cfg.nu = m.get_or("nu", cfg.nu)?;
        cfg.merge = m.get_or("merge", cfg.merge)?;
        cfg.policy = m.get_or("policy", cfg.policy)?;
        cfg.psi = m.get_or("psi", cfg.psi)?;
        cfg.mlp_ratio = m.get_or("mlp_ratio", cfg.mlp_ratio)?;
        if let Some(a) = m.get("activation") {
            cfg.activation = parse_activation(a)?;
        }
        cfg.multilabel = m.get_or("multilabel", cfg.multilabel)?;
        cfg.pos_embed = match m.get("pos_embed").unwrap_or("learned") {
            "learned" => true,
            "none" => false,
            other => return Err(Error::Config(format!("unknown pos_embed `{other}`"))),
        };
        cfg.tau = match m.get("tau").unwrap_or("sqrt_tokens") {
            "sqrt_tokens" => TauRule::SqrtTokens,
            _ => TauRule::Fixed(m.require("tau")?),
        };
        cfg.attn_eps = m.get_or("attn_eps", cfg.attn_eps)?;
        cfg.ln_eps = m.get_or("ln_eps", cfg.ln_eps)?;
        cfg.init_std = m.get_or("init_std", cfg.init_std)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn pair(m: &Manifest, key: &str, default: (usize, usize)) -> Result<(usize, usize)> {
    match m.list::<usize>(key)?.as_deref() {
        None => Ok(default),
        Some(&[a]) => Ok((a, a)),
        Some(&[a, b]) => Ok((a, b)),
        Some(other) => Err(Error::Config(format!("`{key}` takes one or two values, got {other:?}"))),
    }
}

pub fn parse_activation(s: &str) -> Result<UnaryFn> {
    match s {
        "softplus" => Ok(UnaryFn::Softplus),
        "relu" => Ok(UnaryFn::Relu),
        "elu" => Ok(UnaryFn::EluPlusOne),
        _ => Err(Error::Config(format!("unknown activation `{s}`"))),
    }
}

pub fn activation_name(f: UnaryFn) -> &'static str {
    match f {
        UnaryFn::Softplus => "softplus",
        UnaryFn::Relu => "relu",
        UnaryFn::EluPlusOne => "elu",
        UnaryFn::Exp => "exp",
    }
}

/// Attention kind per block under `policy`.
pub fn attention_schedule(policy: AttentionPolicy, psi: FeatureMap, blocks: &[BlockSpec]) -> Vec<AttentionKind> {
    blocks
        .iter()
        .map(|b| match policy {
            AttentionPolicy::Mixed => select_attention(b.tokens, b.dim, psi),
            AttentionPolicy::AllDot => AttentionKind::Dot,
            AttentionPolicy::AllApprox => AttentionKind::Approx(psi),
        })
        .collect()
}
