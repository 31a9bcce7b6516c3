//! Analytic FLOP accounting.
//!
//! A fused multiply-add counts as 2 operations; softmax and normalization
//! are not counted. For a block whose input grid is `T × L` tokens of width
//! `D`:
//!
//! | term                           | divided            | joint (`N = T·L`) |
//! |--------------------------------|--------------------|-------------------|
//! | QKV + output projections       | `8·T·L·D²`         | `8·N·D²`          |
//! | attention scores               | `2·L·T²·D + 2·T·L²·D` | `2·N²·D`       |
//! | attention-weighted values      | same as scores     | `2·N²·D`          |
//! | feed-forward (`D → 4D → D`)    | `16·T·L·D²`        | `16·N·D²`         |
//! | matching similarity            | `T²·D` and/or `L²·D` when that dimension is reduced | `N²·D` |
//!
//! Joint attention treats the clip as one sequence, so its attention terms
//! sit in the `spatial_*` columns and the `temporal_*` columns are zero.
//!
//! CSV tables (see [`flop_table_csv`]) have the header
//!
//! ```text
//! attention,frames,patches,dim,blocks,rt,rs,final_tokens,temporal_qkv,temporal_scores,
//! temporal_values,spatial_qkv,spatial_scores,spatial_values,ffn,similarity_overhead,total
//! ```

use serde::Serialize;

use crate::config::EncoderConfig;
use crate::error::{Result, TestaError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Breakdown {
    pub temporal_qkv: u64,
    pub temporal_scores: u64,
    pub temporal_values: u64,
    pub spatial_qkv: u64,
    pub spatial_scores: u64,
    pub spatial_values: u64,
    pub ffn: u64,
    pub similarity_overhead: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.temporal_qkv
            + self.temporal_scores
            + self.temporal_values
            + self.spatial_qkv
            + self.spatial_scores
            + self.spatial_values
            + self.ffn
            + self.similarity_overhead
    }

    /// Score and value terms of all attention sublayers.
    pub fn attention(&self) -> u64 {
        self.temporal_scores + self.temporal_values + self.spatial_scores + self.spatial_values
    }

    fn add(&mut self, o: &Breakdown) {
        self.temporal_qkv += o.temporal_qkv;
        self.temporal_scores += o.temporal_scores;
        self.temporal_values += o.temporal_values;
        self.spatial_qkv += o.spatial_qkv;
        self.spatial_scores += o.spatial_scores;
        self.spatial_values += o.spatial_values;
        self.ffn += o.ffn;
        self.similarity_overhead += o.similarity_overhead;
    }

    fn values(&self) -> [u64; 8] {
        [
            self.temporal_qkv,
            self.temporal_scores,
            self.temporal_values,
            self.spatial_qkv,
            self.spatial_scores,
            self.spatial_values,
            self.ffn,
            self.similarity_overhead,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Divided,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockFlops {
    pub frames: usize,
    pub patches: usize,
    pub flops: Breakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub kind: AttentionKind,
    pub blocks: Vec<BlockFlops>,
    pub totals: Breakdown,
    pub total: u64,
    /// Token grid after the last block.
    pub final_shape: (usize, usize),
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }

    fn build(kind: AttentionKind, blocks: Vec<BlockFlops>, final_shape: (usize, usize)) -> Self {
        let mut totals = Breakdown::default();
        blocks.iter().for_each(|b| totals.add(&b.flops));
        Self {
            kind,
            total: totals.total(),
            blocks,
            totals,
            final_shape,
        }
    }
}

/// Per-block input shapes with the reductions each block applies.
fn block_inputs(cfg: &EncoderConfig) -> Vec<(u64, u64, bool, bool)> {
    let (mut t, mut l) = (cfg.frames, cfg.patches());
    (0..cfg.blocks)
        .map(|_| {
            let (rt, rs) = cfg.effective_reductions(t, l);
            let row = (t as u64, l as u64, rt > 0, rs > 0);
            t -= rt;
            l -= rs;
            row
        })
        .collect()
}

/// Divided space-time attention with the config's token schedule.
pub fn flops_divided(cfg: &EncoderConfig) -> FlopReport {
    let d = cfg.dim as u64;
    let blocks = block_inputs(cfg)
        .into_iter()
        .map(|(t, l, reduce_t, reduce_s)| BlockFlops {
            frames: t as usize,
            patches: l as usize,
            flops: Breakdown {
                temporal_qkv: 4 * t * l * d * d,
                temporal_scores: 2 * l * t * t * d,
                temporal_values: 2 * l * t * t * d,
                spatial_qkv: 4 * t * l * d * d,
                spatial_scores: 2 * t * l * l * d,
                spatial_values: 2 * t * l * l * d,
                ffn: 16 * t * l * d * d,
                similarity_overhead: if reduce_t { t * t * d } else { 0 }
                    + if reduce_s { l * l * d } else { 0 },
            },
        })
        .collect();
    FlopReport::build(AttentionKind::Divided, blocks, cfg.final_shape())
}

/// Joint space-time attention over all `T_i·L_i` tokens, same schedule.
pub fn flops_joint(cfg: &EncoderConfig) -> FlopReport {
    let d = cfg.dim as u64;
    let blocks = block_inputs(cfg)
        .into_iter()
        .map(|(t, l, reduce_t, reduce_s)| {
            let n = t * l;
            BlockFlops {
                frames: t as usize,
                patches: l as usize,
                flops: Breakdown {
                    spatial_qkv: 8 * n * d * d,
                    spatial_scores: 2 * n * n * d,
                    spatial_values: 2 * n * n * d,
                    ffn: 16 * n * d * d,
                    similarity_overhead: if reduce_t || reduce_s { n * n * d } else { 0 },
                    ..Breakdown::default()
                },
            }
        })
        .collect();
    FlopReport::build(AttentionKind::Joint, blocks, cfg.final_shape())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config: EncoderConfig,
    pub report: FlopReport,
}

/// One divided-attention report per `(rt, rs)` point. Points the schedule
/// cannot fully honour are clamped.
pub fn sweep(cfg: &EncoderConfig, points: &[(usize, usize)]) -> Vec<SweepRow> {
    points
        .iter()
        .map(|&(rt, rs)| {
            let config = EncoderConfig {
                rt,
                rs,
                clamp: true,
                ..cfg.clone()
            };
            SweepRow {
                report: flops_divided(&config),
                config,
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 17] = [
    "attention",
    "frames",
    "patches",
    "dim",
    "blocks",
    "rt",
    "rs",
    "final_tokens",
    "temporal_qkv",
    "temporal_scores",
    "temporal_values",
    "spatial_qkv",
    "spatial_scores",
    "spatial_values",
    "ffn",
    "similarity_overhead",
    "total",
];

/// Machine-readable table, one line per report.
pub fn flop_table_csv<'a>(
    rows: impl IntoIterator<Item = (&'a EncoderConfig, &'a FlopReport)>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for (cfg, r) in rows {
        let kind = match r.kind {
            AttentionKind::Divided => "divided",
            AttentionKind::Joint => "joint",
        };
        let mut rec = vec![
            kind.to_string(),
            cfg.frames.to_string(),
            cfg.patches().to_string(),
            cfg.dim.to_string(),
            cfg.blocks.to_string(),
            cfg.rt.to_string(),
            cfg.rs.to_string(),
            (r.final_shape.0 * r.final_shape.1).to_string(),
        ];
        rec.extend(r.totals.values().iter().map(u64::to_string));
        rec.push(r.total.to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| TestaError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Least-squares line `y = a + b·x`; returns `(a, b)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly).1
}
