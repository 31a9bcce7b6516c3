//! Encoder configuration and its `key = value` text form.
//!
//! ```text
//! # 96-frame default
//! frames = 96
//! height = 224
//! width = 224
//! patch = 16
//! dim = 768
//! heads = 12
//! blocks = 12
//! rt = 4
//! rs = 8
//! strategy = geometry
//! ```
//!
//! `frames height width patch dim heads blocks rt rs` are required; the rest
//! default as in [`EncoderConfig::default_for`]. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::{MergeWeighting, Strategy};
use crate::error::{Result, TestaError};

/// Whether one spatial plan serves all frames or each frame gets its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialPlanMode {
    Shared,
    PerFrame,
}

impl fmt::Display for SpatialPlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialPlanMode::Shared => "shared",
            SpatialPlanMode::PerFrame => "per-frame",
        })
    }
}

impl FromStr for SpatialPlanMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shared" => Ok(SpatialPlanMode::Shared),
            "per-frame" | "per_frame" => Ok(SpatialPlanMode::PerFrame),
            other => Err(format!(
                "unknown spatial plan mode '{other}' (shared|per-frame)"
            )),
        }
    }
}

/// Merge similar tokens, or drop unimportant ones (the pruning baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionMethod {
    Merge,
    Prune,
}

impl fmt::Display for ReductionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReductionMethod::Merge => "merge",
            ReductionMethod::Prune => "prune",
        })
    }
}

impl FromStr for ReductionMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "merge" => Ok(ReductionMethod::Merge),
            "prune" => Ok(ReductionMethod::Prune),
            other => Err(format!("unknown reduction '{other}' (merge|prune)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Frames removed per block by temporal aggregation.
    pub rt: usize,
    /// Patches removed per block by spatial aggregation.
    pub rs: usize,
    pub strategy: Strategy,
    pub weighting: MergeWeighting,
    pub spatial_plan: SpatialPlanMode,
    pub reduction: ReductionMethod,
    /// Shrink reductions that would exceed what a block can remove instead
    /// of rejecting the config.
    pub clamp: bool,
    pub seed: u64,
}

const REQUIRED: [&str; 9] = [
    "frames", "height", "width", "patch", "dim", "heads", "blocks", "rt", "rs",
];
const OPTIONAL: [&str; 6] = [
    "strategy",
    "weighting",
    "spatial_plan",
    "reduction",
    "clamp",
    "seed",
];

impl EncoderConfig {
    /// ViT-B/16 geometry at 224×224 with aggregation disabled.
    pub fn default_for(frames: usize) -> Self {
        Self {
            frames,
            height: 224,
            width: 224,
            patch: 16,
            dim: 768,
            heads: 12,
            blocks: 12,
            rt: 0,
            rs: 0,
            strategy: Strategy::Geometry,
            weighting: MergeWeighting::Sized,
            spatial_plan: SpatialPlanMode::Shared,
            reduction: ReductionMethod::Merge,
            clamp: false,
            seed: 0,
        }
    }

    /// The 96-frame setting: `R_T = 4`, `R_S = 8`.
    pub fn long_video() -> Self {
        Self {
            rt: 4,
            rs: 8,
            ..Self::default_for(96)
        }
    }

    /// The 32-frame setting: `R_T = 1`, `R_S = 12`.
    pub fn short_video() -> Self {
        Self {
            rt: 1,
            rs: 12,
            ..Self::default_for(32)
        }
    }

    pub fn patches(&self) -> usize {
        if self.patch == 0 {
            return 0;
        }
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn without_aggregation(&self) -> Self {
        Self {
            rt: 0,
            rs: 0,
            ..self.clone()
        }
    }

    fn cap(&self, n: usize) -> usize {
        match self.reduction {
            ReductionMethod::Merge => self.strategy.max_reduction(n),
            ReductionMethod::Prune => n.saturating_sub(1),
        }
    }

    /// Reductions actually applied in a block that starts with `(t, l)`.
    pub fn effective_reductions(&self, t: usize, l: usize) -> (usize, usize) {
        (self.rt.min(self.cap(t)), self.rs.min(self.cap(l)))
    }

    /// Token grid shape after each block.
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        let (mut t, mut l) = (self.frames, self.patches());
        (0..self.blocks)
            .map(|_| {
                let (rt, rs) = self.effective_reductions(t, l);
                t -= rt;
                l -= rs;
                (t, l)
            })
            .collect()
    }

    pub fn final_shape(&self) -> (usize, usize) {
        self.schedule()
            .last()
            .copied()
            .unwrap_or((self.frames, self.patches()))
    }

    pub fn final_tokens(&self) -> usize {
        let (t, l) = self.final_shape();
        t * l
    }

    /// Every violated invariant, each naming its field.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                errs.push(format!("{name}: must be at least 1"));
            }
        }
        if self.patch > 0 && (!self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch)) {
            errs.push(format!(
                "patch: {}x{} frames are not divisible into {p}x{p} patches",
                self.height,
                self.width,
                p = self.patch
            ));
        }
        if self.heads > 0 && !self.dim.is_multiple_of(self.heads) {
            errs.push(format!(
                "heads: {} heads do not divide dim {}",
                self.heads, self.dim
            ));
        }
        if !errs.is_empty() || self.clamp {
            return errs;
        }

        let (m, t0, l0) = (
            self.blocks as i64,
            self.frames as i64,
            self.patches() as i64,
        );
        for (name, r, n0) in [("rt", self.rt as i64, t0), ("rs", self.rs as i64, l0)] {
            let left = n0 - m * r;
            if left < 1 {
                errs.push(format!(
                    "{name}: schedule violation ({n0} - {m}*{r} = {left} < 1); set clamp = true to allow"
                ));
            }
        }
        if errs.is_empty() {
            let (mut t, mut l) = (self.frames, self.patches());
            for block in 1..=self.blocks {
                for (name, r, n) in [("rt", self.rt, t), ("rs", self.rs, l)] {
                    if r > self.cap(n) {
                        errs.push(format!(
                            "{name}: block {block} cannot remove {r} of {n} tokens with {} {} (max {})",
                            self.strategy,
                            self.reduction,
                            self.cap(n)
                        ));
                    }
                }
                if !errs.is_empty() {
                    break;
                }
                t -= self.rt;
                l -= self.rs;
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TestaError::Config(errs))
        }
    }

    /// Parse and validate, collecting every problem rather than stopping at
    /// the first.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_fields(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse without checking cross-field invariants, for callers that
    /// adjust the config before validating it.
    pub fn parse_fields(text: &str) -> Result<Self> {
        let mut errs = Vec::new();
        let mut values: BTreeMap<&str, &str> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {}: expected 'key = value'", lineno + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !REQUIRED.contains(&k) && !OPTIONAL.contains(&k) {
                errs.push(format!("{k}: unknown key (line {})", lineno + 1));
            } else if values.insert(k, v).is_some() {
                errs.push(format!("{k}: given more than once"));
            }
        }
        for k in REQUIRED {
            if !values.contains_key(k) {
                errs.push(format!("{k}: required field missing"));
            }
        }

        let mut cfg = Self::default_for(1);
        fn set<T: FromStr>(
            errs: &mut Vec<String>,
            values: &BTreeMap<&str, &str>,
            key: &str,
            slot: &mut T,
        ) where
            T::Err: fmt::Display,
        {
            if let Some(v) = values.get(key) {
                match v.parse() {
                    Ok(x) => *slot = x,
                    Err(e) => errs.push(format!("{key}: cannot parse '{v}': {e}")),
                }
            }
        }
        set(&mut errs, &values, "frames", &mut cfg.frames);
        set(&mut errs, &values, "height", &mut cfg.height);
        set(&mut errs, &values, "width", &mut cfg.width);
        set(&mut errs, &values, "patch", &mut cfg.patch);
        set(&mut errs, &values, "dim", &mut cfg.dim);
        set(&mut errs, &values, "heads", &mut cfg.heads);
        set(&mut errs, &values, "blocks", &mut cfg.blocks);
        set(&mut errs, &values, "rt", &mut cfg.rt);
        set(&mut errs, &values, "rs", &mut cfg.rs);
        set(&mut errs, &values, "strategy", &mut cfg.strategy);
        set(&mut errs, &values, "weighting", &mut cfg.weighting);
        set(&mut errs, &values, "spatial_plan", &mut cfg.spatial_plan);
        set(&mut errs, &values, "reduction", &mut cfg.reduction);
        set(&mut errs, &values, "clamp", &mut cfg.clamp);
        set(&mut errs, &values, "seed", &mut cfg.seed);

        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(TestaError::Config(errs))
        }
    }

    /// Normalized text form; [`EncoderConfig::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        format!(
            "frames = {}\nheight = {}\nwidth = {}\npatch = {}\ndim = {}\nheads = {}\nblocks = {}\n\
             rt = {}\nrs = {}\nstrategy = {}\nweighting = {}\nspatial_plan = {}\nreduction = {}\n\
             clamp = {}\nseed = {}\n",
            self.frames,
            self.height,
            self.width,
            self.patch,
            self.dim,
            self.heads,
            self.blocks,
            self.rt,
            self.rs,
            self.strategy,
            self.weighting,
            self.spatial_plan,
            self.reduction,
            self.clamp,
            self.seed
        )
    }
}
