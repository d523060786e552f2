//! Analytic FLOP, parameter and activation accounting for a block schedule.
//!
//! Token counts `N` exclude CLS for FLOPs and attention matrices. Activation
//! counts include it, because they mirror what a forward pass records.
//!
//! Attention matrix size follows the `min(N, D)²` accounting: dot attention
//! holds an `N × N` score matrix, approximate attention a `D × D` summary
//! (`h` blocks of `d × d` on its diagonal). Physical per-head temporaries,
//! `h·N²` and `h·d²`, are reported separately as `attn_temp_elems`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::encoder::{AttentionPolicy, BlockSpec, EncoderConfig, StemSpec};
use crate::error::{Error, Result};
use crate::reduction::{MergeKind, ReductionSpec, TokenLayout};

/// How operations are converted to FLOPs. Stamped into every report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountingConvention {
    /// FLOPs charged per multiply-add.
    pub multiply_add_flops: u64,
    /// Charge 5 FLOPs per softmax element.
    pub count_softmax: bool,
    /// Charge 3 FLOPs per output element for the approximate normalizer.
    pub count_normalizer: bool,
}

impl Default for CountingConvention {
    fn default() -> Self {
        CountingConvention {
            multiply_add_flops: 2,
            count_softmax: true,
            count_normalizer: true,
        }
    }
}

impl fmt::Display for CountingConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "multiply_add={} softmax={} normalizer={}",
            self.multiply_add_flops,
            if self.count_softmax { 5 } else { 0 },
            if self.count_normalizer { 3 } else { 0 }
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttnCost {
    /// Q/K/V and output projections.
    pub proj_flops: u64,
    /// Everything between the projections.
    pub core_flops: u64,
    pub matrix_elems: u64,
    pub temp_elems: u64,
}

impl AttnCost {
    pub fn flops(&self) -> u64 {
        self.proj_flops + self.core_flops
    }
}

/// Cost of one attention layer over `n` tokens of width `d` with `h` heads.
pub fn attn_cost(kind: AttentionKind, n: u64, d: u64, h: u64, conv: CountingConvention) -> AttnCost {
    let m = conv.multiply_add_flops;
    let dh = d / h;
    let proj_flops = m * 3 * n * d * d + m * n * d * d;
    match kind {
        AttentionKind::Dot => AttnCost {
            proj_flops,
            core_flops: m * n * n * d
                + m * n * n * d
                + if conv.count_softmax { 5 * n * n * h } else { 0 },
            matrix_elems: n * n,
            temp_elems: h * n * n,
        },
        AttentionKind::Approx(_) => AttnCost {
            proj_flops,
            core_flops: m * n * d * dh
                + m * n * d * dh
                + if conv.count_normalizer { 3 * n * d } else { 0 },
            matrix_elems: d * d,
            temp_elems: h * dh * dh,
        },
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockCost {
    pub tokens: u64,
    pub dim: u64,
    pub flops_attn: u64,
    pub flops_proj: u64,
    pub flops_mlp: u64,
    /// Stem (block 0), merge and expansion (after the block), head (last block).
    pub flops_other: u64,
    /// Largest attention matrix of the block's layers.
    pub attn_matrix_elems: u64,
    pub attn_temp_elems: u64,
    pub activation_elems: u64,
    pub params: u64,
}

impl BlockCost {
    pub fn flops(&self) -> u64 {
        self.flops_attn + self.flops_proj + self.flops_mlp + self.flops_other
    }

    fn add(&mut self, o: &BlockCost) {
        self.flops_attn += o.flops_attn;
        self.flops_proj += o.flops_proj;
        self.flops_mlp += o.flops_mlp;
        self.flops_other += o.flops_other;
        self.attn_matrix_elems += o.attn_matrix_elems;
        self.attn_temp_elems += o.attn_temp_elems;
        self.activation_elems += o.activation_elems;
        self.params += o.params;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub label: String,
    pub convention: CountingConvention,
    pub per_block: Vec<BlockCost>,
    /// Field-wise sums of `per_block`; `tokens` and `dim` are left at zero.
    pub totals: BlockCost,
}

impl CostReport {
    pub fn flops_total(&self) -> u64 {
        self.totals.flops()
    }
}

/// Activation elements recorded by one encoder layer over `r` rows.
fn layer_activations(kind: AttentionKind, r: u64, d: u64, h: u64, hidden: u64) -> u64 {
    let attn = match kind {
        AttentionKind::Dot if h == 1 => 3 * r * r + r * d,
        AttentionKind::Dot => 3 * h * r * r + 5 * r * d,
        AttentionKind::Approx(_) => r * d,
    };
    // ln1, q/k/v with bias, attention, out projection with bias, residual,
    // ln2, fc1 with bias and activation, fc2 with bias, residual
    r * d + 6 * r * d + attn + 2 * r * d + r * d + r * d + 3 * r * hidden + 2 * r * d + r * d
}

fn merge_cost(red: &ReductionSpec, layout: TokenLayout, d: u64, conv: CountingConvention) -> Result<(u64, u64, u64)> {
    let m = conv.multiply_add_flops;
    let out = red.out_layout(layout)?.tokens() as u64;
    let n = layout.tokens() as u64;
    let (flops, params) = match (red.kind, layout) {
        (MergeKind::Conv, TokenLayout::Seq1D(_)) => {
            let k = red.window_1d().0 as u64;
            (m * out * k * d * d, k * d * d + d)
        }
        (MergeKind::Conv, TokenLayout::Grid2D { .. }) => {
            let k = red.window_2d()?.0 as u64;
            (m * out * k * k * d * d, k * k * d * d + d)
        }
        (MergeKind::AvgPool, TokenLayout::Seq1D(_)) => (out * red.window_1d().0 as u64 * d, 0),
        (MergeKind::AvgPool, TokenLayout::Grid2D { .. }) => {
            let k = red.window_2d()?.0 as u64;
            (out * k * k * d, 0)
        }
        (MergeKind::Linear, _) => (m * out * n * d, out * n),
        (MergeKind::None, _) => (0, 0),
    };
    // activations: CLS split, token slice, merged tokens (plus bias), rejoin
    let acts = match red.kind {
        MergeKind::None => 0,
        MergeKind::Conv => d + n * d + 2 * out * d + (out + 1) * d,
        _ => d + n * d + out * d + (out + 1) * d,
    };
    Ok((flops, params, acts))
}

/// Cost of the full model under `config`'s own policy and merge kind.
pub fn model_cost(config: &EncoderConfig, conv: CountingConvention) -> Result<CostReport> {
    let blocks = config.schedule()?;
    let red = config.reduction()?;
    let m = conv.multiply_add_flops;
    let mut per_block = Vec::with_capacity(blocks.len());
    for (i, blk) in blocks.iter().enumerate() {
        per_block.push(block_cost(config, &red, blk, i + 1 == blocks.len(), conv)?);
    }

    let first = &mut per_block[0];
    let d0 = config.d0 as u64;
    let n0 = blocks[0].tokens as u64;
    let stem_w: u64 = config.stem.weight_shape(config.d0).iter().map(|&e| e as u64).product();
    let taps = stem_w / d0;
    first.flops_other += m * n0 * taps * d0;
    first.params += stem_w + d0 + d0 + if config.pos_embed { n0 * d0 } else { 0 };
    let reshaped = matches!(config.stem, StemSpec::Grid2D { .. }) as u64;
    // conv output, reshape, bias, position add, CLS concat
    first.activation_elems += (2 + reshaped + config.pos_embed as u64) * n0 * d0 + (n0 + 1) * d0;

    let last = per_block.last_mut().expect("at least one block");
    let db = config.final_dim() as u64;
    let c = config.num_classes as u64;
    last.flops_other += m * db * c;
    last.params += 2 * db + db * c + c;
    let rows = last.tokens + 1;
    last.activation_elems += rows * db + db + 2 * c;

    let mut totals = BlockCost::default();
    for b in &per_block {
        totals.add(b);
    }
    Ok(CostReport {
        label: config.policy.to_string(),
        convention: conv,
        per_block,
        totals,
    })
}

fn block_cost(config: &EncoderConfig, red: &ReductionSpec, blk: &BlockSpec, last: bool, conv: CountingConvention) -> Result<BlockCost> {
    let m = conv.multiply_add_flops;
    let (n, d, h) = (blk.tokens as u64, blk.dim as u64, blk.heads as u64);
    let hidden = d * config.mlp_ratio as u64;
    let layers = blk.layers as u64;
    let a = attn_cost(blk.kind, n, d, h, conv);
    let mut c = BlockCost {
        tokens: n,
        dim: d,
        flops_attn: layers * a.core_flops,
        flops_proj: layers * a.proj_flops,
        flops_mlp: layers * 2 * m * n * d * hidden,
        flops_other: 0,
        attn_matrix_elems: if layers > 0 { a.matrix_elems } else { 0 },
        attn_temp_elems: if layers > 0 { a.temp_elems } else { 0 },
        activation_elems: layers * layer_activations(blk.kind, n + 1, d, h, hidden),
        params: layers * (4 * d + 4 * (d * d + d) + 2 * d * hidden + hidden + d),
    };
    if !last {
        let (f, p, acts) = merge_cost(red, blk.layout, d, conv)?;
        let out = red.out_layout(blk.layout)?.tokens() as u64;
        c.flops_other += f + m * out * d * 2 * d;
        c.params += p + 2 * d * d + 2 * d;
        c.activation_elems += acts + 2 * (out + 1) * 2 * d;
    }
    Ok(c)
}

/// Mixed, AllDot, AllApprox and NoReduction reports for `config`.
/// NoReduction keeps every block at the stem's token count under the Mixed rule.
pub fn compare_schedules(config: &EncoderConfig, conv: CountingConvention) -> Result<Vec<CostReport>> {
    let mut out = Vec::with_capacity(4);
    for policy in [AttentionPolicy::Mixed, AttentionPolicy::AllDot, AttentionPolicy::AllApprox] {
        let mut c = config.clone();
        c.policy = policy;
        out.push(model_cost(&c, conv)?);
    }
    let mut c = config.clone();
    c.policy = AttentionPolicy::Mixed;
    c.merge = MergeKind::None;
    let mut r = model_cost(&c, conv)?;
    r.label = "noreduction".into();
    out.push(r);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TableFormat {
    #[default]
    Csv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" | "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            _ => Err(Error::Config(format!("unknown table format `{s}`"))),
        }
    }
}

pub const COLUMNS: [&str; 6] = ["policy", "params", "matrix_elems", "attn_flops", "flops_total", "activation_elems"];

/// One parsed table row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableRow {
    pub policy: String,
    pub params: u64,
    pub matrix_elems: u64,
    /// Attention-core FLOPs, projections excluded.
    pub attn_flops: u64,
    pub flops_total: u64,
    pub activation_elems: u64,
}

impl From<&CostReport> for TableRow {
    fn from(r: &CostReport) -> Self {
        TableRow {
            policy: r.label.clone(),
            params: r.totals.params,
            matrix_elems: r.totals.attn_matrix_elems,
            attn_flops: r.totals.flops_attn,
            flops_total: r.flops_total(),
            activation_elems: r.totals.activation_elems,
        }
    }
}

/// Renders one row per report. The first line is a `#` comment naming the
/// counting convention.
pub fn emit_table(reports: &[CostReport], format: TableFormat) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("emit_table needs at least one report".into()))?;
    let mut s = String::new();
    writeln!(s, "# convention: {}", first.convention).unwrap();
    let rows: Vec<TableRow> = reports.iter().map(TableRow::from).collect();
    let cells = |r: &TableRow| {
        [
            r.policy.clone(),
            r.params.to_string(),
            r.matrix_elems.to_string(),
            r.attn_flops.to_string(),
            r.flops_total.to_string(),
            r.activation_elems.to_string(),
        ]
    };
    match format {
        TableFormat::Csv => {
            writeln!(s, "{}", COLUMNS.join(",")).unwrap();
            for r in &rows {
                writeln!(s, "{}", cells(r).join(",")).unwrap();
            }
        }
        TableFormat::Markdown => {
            writeln!(s, "| {} |", COLUMNS.join(" | ")).unwrap();
            writeln!(s, "|{}", "---|".repeat(COLUMNS.len())).unwrap();
            for r in &rows {
                writeln!(s, "| {} |", cells(r).join(" | ")).unwrap();
            }
        }
    }
    Ok(s)
}

/// Parses the CSV form written by [`emit_table`].
pub fn parse_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty table".into()))?;
    if header.split(',').collect::<Vec<_>>() != COLUMNS {
        return Err(Error::Format(format!("unexpected header `{header}`")));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<u64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad field {i} in `{l}`")))
            };
            if f.len() != COLUMNS.len() {
                return Err(Error::Format(format!("expected {} fields in `{l}`", COLUMNS.len())));
            }
            Ok(TableRow {
                policy: f[0].to_string(),
                params: num(1)?,
                matrix_elems: num(2)?,
                attn_flops: num(3)?,
                flops_total: num(4)?,
                activation_elems: num(5)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FeatureMap;
    use crate::encoder::Model;
    use crate::tensor::{alloc, Tensor};
    use rand::{Rng, SeedableRng};

    const APPROX: AttentionKind = AttentionKind::Approx(FeatureMap::EluPlusOne);

    fn conv() -> CountingConvention {
        CountingConvention::default()
    }

    fn seq(length: usize, kernel: usize, stride: usize) -> StemSpec {
        StemSpec::Seq1D { length, in_channels: 1, kernel, stride }
    }

    #[test]
    fn hand_count_small_dot_layer() {
        let c = attn_cost(AttentionKind::Dot, 4, 2, 1, conv());
        // projections 96 + 32, scores 64, weighting 64, softmax 80
        assert_eq!(c.proj_flops, 96 + 32);
        assert_eq!(c.core_flops, 64 + 64 + 80);
        assert_eq!(c.flops(), 336);
        assert_eq!(c.matrix_elems, 16);
        assert_eq!(attn_cost(APPROX, 4, 2, 1, conv()).matrix_elems, 4);
    }

    #[test]
    fn audio_block_ratio() {
        let dot = attn_cost(AttentionKind::Dot, 8192, 96, 1, conv()).matrix_elems;
        let approx = attn_cost(APPROX, 8192, 96, 1, conv()).matrix_elems;
        assert_eq!(dot, 8192 * 8192);
        assert_eq!(approx, 9216);
        assert_eq!(dot / approx, 7281);
        assert!((dot as f64 / approx as f64 - (8192.0f64 / 96.0).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn scaling_law() {
        for n in [256u64, 512] {
            let d1 = attn_cost(AttentionKind::Dot, n, 96, 2, conv()).core_flops;
            let d2 = attn_cost(AttentionKind::Dot, 2 * n, 96, 2, conv()).core_flops;
            assert_eq!(d2, 4 * d1);
            let a1 = attn_cost(APPROX, n, 96, 2, conv()).core_flops;
            let a2 = attn_cost(APPROX, 2 * n, 96, 2, conv()).core_flops;
            assert_eq!(a2, 2 * a1);
        }
    }

    #[test]
    fn mixed_takes_the_smaller_matrix_per_block() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let blocks = r.random_range(1..5);
            let d0 = 8 * r.random_range(1..13);
            let layers = (0..blocks).map(|_| r.random_range(1..3)).collect();
            let heads = (0..blocks).map(|b| [1, 2, 4, 8][r.random_range(0..4)].min(d0 << b)).collect::<Vec<usize>>();
            let heads = heads.iter().enumerate().map(|(b, &h)| if (d0 << b) % h == 0 { h } else { 1 }).collect();
            let mut cfg = EncoderConfig::custom(layers, d0, heads, seq(r.random_range(16..6000), 9, 1), 3);
            let reports = compare_schedules(&cfg, conv()).unwrap();
            for (i, mixed) in reports[0].per_block.iter().enumerate() {
                let dot = reports[1].per_block[i].attn_matrix_elems;
                let approx = reports[2].per_block[i].attn_matrix_elems;
                assert_eq!(mixed.attn_matrix_elems, dot.min(approx));
            }
            cfg.policy = AttentionPolicy::AllDot;
            let any_long = cfg.schedule().unwrap().iter().any(|b| b.tokens > b.dim);
            if any_long {
                assert!(reports[0].totals.flops_attn <= reports[1].totals.flops_attn);
            }
        }
    }

    #[test]
    fn base_text_mixed_is_cheaper_than_alldot() {
        let cfg = EncoderConfig::base(seq(2048, 21, 1), 100);
        let r = compare_schedules(&cfg, conv()).unwrap();
        assert!(r[0].totals.attn_matrix_elems < r[1].totals.attn_matrix_elems);
        assert!(r[0].flops_total() < r[1].flops_total());
    }

    #[test]
    fn noreduction_is_over_ten_times_costlier_at_3750_tokens() {
        let cfg = EncoderConfig::small(seq(3750, 9, 1), 6);
        let r = compare_schedules(&cfg, conv()).unwrap();
        let ratio = r[3].flops_total() as f64 / r[0].flops_total() as f64;
        assert!(ratio > 10.0, "{ratio}");
    }

    #[test]
    fn zero_layers_cost_nothing_in_attention() {
        let cfg = EncoderConfig::custom(vec![0, 0], 8, vec![1, 1], seq(64, 3, 1), 2);
        let r = model_cost(&cfg, conv()).unwrap();
        assert_eq!(r.totals.flops_attn, 0);
        assert_eq!(r.totals.attn_matrix_elems, 0);
    }

    #[test]
    fn totals_are_block_sums() {
        let cfg = EncoderConfig::small(seq(1000, 9, 1), 6);
        let r = model_cost(&cfg, conv()).unwrap();
        let fl: u64 = r.per_block.iter().map(BlockCost::flops).sum();
        let p: u64 = r.per_block.iter().map(|b| b.params).sum();
        assert_eq!(fl, r.flops_total());
        assert_eq!(p, r.totals.params);
        assert_eq!(r, model_cost(&cfg, conv()).unwrap());
    }

    #[test]
    fn parameter_counts_match_built_models() {
        for merge in [MergeKind::Conv, MergeKind::AvgPool, MergeKind::Linear, MergeKind::None] {
            let mut cfg = EncoderConfig::custom(vec![1, 2, 1], 8, vec![1, 2, 4], seq(64, 5, 2), 5);
            cfg.merge = merge;
            let m = Model::<f32>::build(&cfg, 0).unwrap();
            assert_eq!(model_cost(&cfg, conv()).unwrap().totals.params, m.param_count() as u64, "{merge}");
        }
        let grid = StemSpec::Grid2D { in_h: 16, in_w: 16, in_channels: 2, kernel: (7, 7), stride: (4, 4) };
        let cfg = EncoderConfig::custom(vec![1, 1], 8, vec![1, 1], grid, 3);
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(model_cost(&cfg, conv()).unwrap().totals.params, m.param_count() as u64);
    }

    #[test]
    fn activation_count_tracks_the_allocation_counter() {
        for policy in [AttentionPolicy::AllDot, AttentionPolicy::AllApprox] {
            let mut cfg = EncoderConfig::custom(vec![1, 1], 16, vec![2, 2], seq(96, 3, 1), 4);
            cfg.policy = policy;
            let m = Model::<f64>::build(&cfg, 0).unwrap();
            let x = Tensor::<f64>::ones(&[96, 1]);
            let (_, rep) = alloc::track(|| m.logits(&x).unwrap());
            let analytic = model_cost(&cfg, conv()).unwrap().totals.activation_elems as f64;
            let ratio = rep.peak_elements as f64 / analytic;
            assert!((0.5..=2.0).contains(&ratio), "{policy}: {ratio}");
        }
    }

    #[test]
    fn table_roundtrip_and_layout() {
        let cfg = EncoderConfig::small(seq(3750, 9, 1), 6);
        let reports = compare_schedules(&cfg, conv()).unwrap();
        let csv = emit_table(&reports, "".parse().unwrap()).unwrap();
        let rows = parse_csv(&csv).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows, reports.iter().map(TableRow::from).collect::<Vec<_>>());
        assert_eq!(
            rows.iter().map(|r| r.policy.as_str()).collect::<Vec<_>>(),
            ["mixed", "alldot", "allapprox", "noreduction"]
        );
        let md = emit_table(&reports, TableFormat::Markdown).unwrap();
        let header = md.lines().nth(1).unwrap();
        assert_eq!(header.matches('|').count(), COLUMNS.len() + 1);
        assert!(emit_table(&[], TableFormat::Csv).is_err());
    }
}
