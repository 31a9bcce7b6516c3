//! Ablation tables: which dimension to reduce, which matching strategy,
//! and merging versus pruning.
//!
//! Every row encodes the same video with the same seeded weights, so rows
//! differ only in how tokens are reduced. Rows are clamped so the fixed
//! reductions also run on small grids.

use std::fmt;

use serde::Serialize;

use crate::aggregation::Strategy;
use crate::config::{EncoderConfig, ReductionMethod};
use crate::costmodel::flops_divided;
use crate::encoder::{encode, ModelWeights};
use crate::error::{Result, TestaError};
use crate::synthdata::{score_purity, PlantedSpec};
use crate::tokenization::RawVideo;
use crate::trajectory::recover_groups;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Dimension,
    Strategy,
    Reduction,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Dimension => "dimension",
            Suite::Strategy => "strategy",
            Suite::Reduction => "reduction",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCase {
    pub suite: Suite,
    pub label: String,
    pub config: EncoderConfig,
}

fn case(
    suite: Suite,
    label: &str,
    base: &EncoderConfig,
    f: impl FnOnce(&mut EncoderConfig),
) -> AblationCase {
    let mut config = EncoderConfig {
        clamp: true,
        ..base.clone()
    };
    f(&mut config);
    AblationCase {
        suite,
        label: label.to_string(),
        config,
    }
}

/// Temporal only (`R_T = 7`), spatial only (`R_S = 14`), both (`4`, `8`).
pub fn dimension_cases(base: &EncoderConfig) -> Vec<AblationCase> {
    vec![
        case(Suite::Dimension, "temporal only (rt=7)", base, |c| {
            (c.rt, c.rs) = (7, 0)
        }),
        case(Suite::Dimension, "spatial only (rs=14)", base, |c| {
            (c.rt, c.rs) = (0, 14)
        }),
        case(
            Suite::Dimension,
            "temporal + spatial (rt=4, rs=8)",
            base,
            |c| (c.rt, c.rs) = (4, 8),
        ),
    ]
}

/// Both matching strategies at the base reductions.
pub fn strategy_cases(base: &EncoderConfig) -> Vec<AblationCase> {
    [Strategy::Importance, Strategy::Geometry]
        .into_iter()
        .map(|s| {
            case(Suite::Strategy, &s.to_string(), base, |c| {
                c.strategy = s;
                c.reduction = ReductionMethod::Merge;
            })
        })
        .collect()
}

/// Merging versus pruning at the base reductions.
pub fn reduction_cases(base: &EncoderConfig) -> Vec<AblationCase> {
    [
        ("merge", ReductionMethod::Merge),
        ("prune", ReductionMethod::Prune),
    ]
    .into_iter()
    .map(|(label, m)| case(Suite::Reduction, label, base, |c| c.reduction = m))
    .collect()
}

pub fn all_cases(base: &EncoderConfig) -> Vec<AblationCase> {
    let mut v = dimension_cases(base);
    v.extend(strategy_cases(base));
    v.extend(reduction_cases(base));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub suite: Suite,
    pub label: String,
    pub strategy: String,
    pub reduction: String,
    pub rt: usize,
    pub rs: usize,
    pub final_frames: usize,
    pub final_patches: usize,
    pub gflops: f64,
    /// GFLOPs relative to the same config without aggregation.
    pub flop_ratio: f64,
    pub mass_in: f64,
    pub mass_out: f64,
    pub purity: Option<f64>,
}

impl AblationRow {
    pub fn conserved(&self) -> bool {
        self.mass_in == self.mass_out
    }
}

fn run_case(
    c: &AblationCase,
    video: &RawVideo,
    truth: Option<&PlantedSpec>,
) -> Result<AblationRow> {
    let cfg = &c.config;
    let weights = ModelWeights::init(cfg)?;
    let enc = encode(video, cfg, &weights)?;
    let purity = match truth {
        Some(spec) => Some(score_purity(
            &recover_groups(&enc.trajectory, cfg.frames, cfg.patches())?,
            spec,
        )?),
        None => None,
    };
    let flops = flops_divided(cfg);
    Ok(AblationRow {
        suite: c.suite,
        label: c.label.clone(),
        strategy: cfg.strategy.to_string(),
        reduction: cfg.reduction.to_string(),
        rt: cfg.rt,
        rs: cfg.rs,
        final_frames: enc.grid.num_frames,
        final_patches: enc.grid.patches,
        gflops: flops.gflops(),
        flop_ratio: flops.total as f64 / flops_divided(&cfg.without_aggregation()).total as f64,
        mass_in: (cfg.frames * cfg.patches()) as f64,
        mass_out: enc.grid.total_constituents(),
        purity,
    })
}

/// Encode every case; rows come back in case order.
pub fn run(
    cases: &[AblationCase],
    video: &RawVideo,
    truth: Option<&PlantedSpec>,
) -> Result<Vec<AblationRow>> {
    if cases.is_empty() {
        return Err(TestaError::Empty("ablation cases"));
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cases
            .par_iter()
            .map(|c| run_case(c, video, truth))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cases.iter().map(|c| run_case(c, video, truth)).collect()
    }
}

pub const CSV_HEADER: [&str; 15] = [
    "suite",
    "label",
    "strategy",
    "reduction",
    "rt",
    "rs",
    "final_frames",
    "final_patches",
    "final_tokens",
    "gflops",
    "flop_ratio",
    "mass_in",
    "mass_out",
    "conserved",
    "purity",
];

pub fn to_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.suite.to_string(),
            r.label.clone(),
            r.strategy.clone(),
            r.reduction.clone(),
            r.rt.to_string(),
            r.rs.to_string(),
            r.final_frames.to_string(),
            r.final_patches.to_string(),
            (r.final_frames * r.final_patches).to_string(),
            format!("{:.4}", r.gflops),
            format!("{:.4}", r.flop_ratio),
            r.mass_in.to_string(),
            r.mass_out.to_string(),
            r.conserved().to_string(),
            r.purity.map(|p| format!("{p:.4}")).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| TestaError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
