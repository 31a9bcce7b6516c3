//! The encoder stack: `M` blocks of temporal attention → temporal
//! aggregation → spatial attention → spatial aggregation → feed-forward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{
    apply_prune, apply_spatial, apply_spatial_per_frame, apply_temporal, plan, prune_plan,
    Dimension, MergePlan, Reduction,
};
use crate::attention::{
    feed_forward, spatial_attention, temporal_attention, AttnStats, BlockWeights, SpatialStats,
};
use crate::config::{EncoderConfig, ReductionMethod, SpatialPlanMode};
use crate::error::{Result, TestaError};
use crate::io::{NamedTensor, TensorFile};
use crate::tokenization::{embed, patchify, EmbeddingWeights, RawVideo, TokenGrid};
use crate::trajectory::{BlockRecord, SpatialReduction, Trajectory};

/// Embedding plus per-block weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embedding: EmbeddingWeights,
    pub blocks: Vec<BlockWeights>,
}

impl ModelWeights {
    /// Seeded random weights for `cfg`, reproducible from `cfg.seed`.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embedding =
            EmbeddingWeights::init(cfg.patch, cfg.patches(), cfg.frames, cfg.dim, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockWeights::init(cfg.dim, cfg.heads, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { embedding, blocks })
    }

    pub fn zero_positional(&mut self) {
        self.embedding.zero_positional();
    }

    /// Make every block an identity on features (see
    /// [`BlockWeights::silence_outputs`]).
    pub fn silence_blocks(&mut self) {
        self.blocks
            .iter_mut()
            .for_each(BlockWeights::silence_outputs);
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::default();
        let e = &self.embedding;
        f.push(NamedTensor::from_matrix("embed.projection", &e.projection));
        f.push(NamedTensor::from_matrix(
            "embed.spatial_pos",
            &e.spatial_pos,
        ));
        f.push(NamedTensor::from_matrix(
            "embed.temporal_pos",
            &e.temporal_pos,
        ));
        f.push(NamedTensor::new(
            "embed.cls",
            vec![e.cls.len()],
            e.cls.clone(),
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, a) in [("temporal", &b.temporal), ("spatial", &b.spatial)] {
                let p = format!("block.{i}.{name}");
                f.push(NamedTensor::new(
                    format!("{p}.norm_gamma"),
                    vec![a.norm_gamma.len()],
                    a.norm_gamma.clone(),
                ));
                f.push(NamedTensor::new(
                    format!("{p}.norm_beta"),
                    vec![a.norm_beta.len()],
                    a.norm_beta.clone(),
                ));
                f.push(NamedTensor::from_matrix(format!("{p}.query"), &a.query));
                f.push(NamedTensor::from_matrix(format!("{p}.key"), &a.key));
                f.push(NamedTensor::from_matrix(format!("{p}.value"), &a.value));
                f.push(NamedTensor::from_matrix(format!("{p}.output"), &a.output));
            }
            let p = format!("block.{i}.ffn");
            let m = &b.ffn;
            f.push(NamedTensor::new(
                format!("{p}.norm_gamma"),
                vec![m.norm_gamma.len()],
                m.norm_gamma.clone(),
            ));
            f.push(NamedTensor::new(
                format!("{p}.norm_beta"),
                vec![m.norm_beta.len()],
                m.norm_beta.clone(),
            ));
            f.push(NamedTensor::from_matrix(format!("{p}.up"), &m.up));
            f.push(NamedTensor::new(
                format!("{p}.up_bias"),
                vec![m.up_bias.len()],
                m.up_bias.clone(),
            ));
            f.push(NamedTensor::from_matrix(format!("{p}.down"), &m.down));
            f.push(NamedTensor::new(
                format!("{p}.down_bias"),
                vec![m.down_bias.len()],
                m.down_bias.clone(),
            ));
        }
        f
    }

    /// Load weights for `cfg`; every tensor must be present with the shape the
    /// config implies.
    pub fn from_tensor_file(f: &TensorFile, cfg: &EncoderConfig) -> Result<Self> {
        let mut w = Self::init(cfg)?;
        let load_m = |name: &str, slot: &mut crate::tensors::Matrix| -> Result<()> {
            let m = f.matrix(name)?;
            if m.shape() != slot.shape() {
                return Err(TestaError::Format(format!(
                    "{name}: shape {:?}, config expects {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
            Ok(())
        };
        let load_v = |name: &str, slot: &mut Vec<f32>| -> Result<()> {
            let v = f.vector(name)?;
            if v.len() != slot.len() {
                return Err(TestaError::Format(format!(
                    "{name}: length {}, expected {}",
                    v.len(),
                    slot.len()
                )));
            }
            *slot = v;
            Ok(())
        };
        let e = &mut w.embedding;
        load_m("embed.projection", &mut e.projection)?;
        load_m("embed.spatial_pos", &mut e.spatial_pos)?;
        load_m("embed.temporal_pos", &mut e.temporal_pos)?;
        load_v("embed.cls", &mut e.cls)?;
        for (i, b) in w.blocks.iter_mut().enumerate() {
            for (name, a) in [("temporal", &mut b.temporal), ("spatial", &mut b.spatial)] {
                let p = format!("block.{i}.{name}");
                load_v(&format!("{p}.norm_gamma"), &mut a.norm_gamma)?;
                load_v(&format!("{p}.norm_beta"), &mut a.norm_beta)?;
                load_m(&format!("{p}.query"), &mut a.query)?;
                load_m(&format!("{p}.key"), &mut a.key)?;
                load_m(&format!("{p}.value"), &mut a.value)?;
                load_m(&format!("{p}.output"), &mut a.output)?;
            }
            let p = format!("block.{i}.ffn");
            let m = &mut b.ffn;
            load_v(&format!("{p}.norm_gamma"), &mut m.norm_gamma)?;
            load_v(&format!("{p}.norm_beta"), &mut m.norm_beta)?;
            load_m(&format!("{p}.up"), &mut m.up)?;
            load_v(&format!("{p}.up_bias"), &mut m.up_bias)?;
            load_m(&format!("{p}.down"), &mut m.down)?;
            load_v(&format!("{p}.down_bias"), &mut m.down_bias)?;
        }
        Ok(w)
    }
}

/// Statistics captured inside one block, for replay and probing.
#[derive(Debug, Clone)]
pub struct BlockStats {
    pub temporal: AttnStats,
    pub spatial: SpatialStats,
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub grid: TokenGrid,
    pub record: BlockRecord,
    pub stats: Option<BlockStats>,
}

/// Build the temporal reduction for a block from frame-level stats.
pub fn temporal_reduction(stats: &AttnStats, r: usize, cfg: &EncoderConfig) -> Result<Reduction> {
    let scores = stats.importance();
    Ok(match cfg.reduction {
        ReductionMethod::Merge => Reduction::Merge(plan(cfg.strategy, &stats.keys, &scores, r)?),
        ReductionMethod::Prune => Reduction::Prune(prune_plan(&scores, r)?),
    })
}

/// Build the spatial reduction for a block from patch-level stats.
pub fn spatial_reduction(
    stats: &SpatialStats,
    r: usize,
    cfg: &EncoderConfig,
) -> Result<SpatialReduction> {
    let one = |s: &AttnStats| -> Result<Reduction> {
        let scores = s.importance();
        Ok(match cfg.reduction {
            ReductionMethod::Merge => Reduction::Merge(plan(cfg.strategy, &s.keys, &scores, r)?),
            ReductionMethod::Prune => Reduction::Prune(prune_plan(&scores, r)?),
        })
    };
    // Pruning always drops the same positions in every frame.
    Ok(match (cfg.spatial_plan, cfg.reduction) {
        (SpatialPlanMode::PerFrame, ReductionMethod::Merge) => {
            SpatialReduction::PerFrame(stats.per_frame.iter().map(one).collect::<Result<_>>()?)
        }
        _ => SpatialReduction::Shared(one(&stats.mean)?),
    })
}

fn apply_reduction(
    grid: &TokenGrid,
    red: &Reduction,
    dim: Dimension,
    cfg: &EncoderConfig,
) -> Result<TokenGrid> {
    match (red, dim) {
        (Reduction::Merge(p), Dimension::Temporal) => apply_temporal(grid, p, cfg.weighting),
        (Reduction::Merge(p), Dimension::Spatial) => apply_spatial(grid, p, cfg.weighting),
        (Reduction::Prune(p), d) => apply_prune(grid, p, d),
    }
}

/// One encoder block. Reductions are recomputed from the block's own
/// attention statistics; `capture` keeps those statistics in the output.
pub fn encode_block(
    grid: &TokenGrid,
    w: &BlockWeights,
    cfg: &EncoderConfig,
    capture: bool,
) -> Result<BlockOutput> {
    let (frames_in, patches_in) = (grid.num_frames, grid.patches);
    let (rt, rs) = cfg.effective_reductions(frames_in, patches_in);

    let (mut g, tstats) = temporal_attention(grid, w)?;
    let temporal = if rt > 0 {
        let red = temporal_reduction(&tstats, rt, cfg)?;
        g = apply_reduction(&g, &red, Dimension::Temporal, cfg)?;
        Some(red)
    } else {
        None
    };

    let (mut g2, sstats) = spatial_attention(&g, w)?;
    let spatial = if rs > 0 {
        let red = spatial_reduction(&sstats, rs, cfg)?;
        g2 = match &red {
            SpatialReduction::Shared(r) => apply_reduction(&g2, r, Dimension::Spatial, cfg)?,
            SpatialReduction::PerFrame(rs) => {
                let plans: Vec<MergePlan> = rs
                    .iter()
                    .map(|r| match r {
                        Reduction::Merge(p) => p.clone(),
                        Reduction::Prune(_) => unreachable!("per-frame pruning is never planned"),
                    })
                    .collect();
                apply_spatial_per_frame(&g2, &plans, cfg.weighting)?
            }
        };
        Some(red)
    } else {
        None
    };

    let out = feed_forward(&g2, w)?;
    Ok(BlockOutput {
        grid: out,
        record: BlockRecord {
            frames_in,
            patches_in,
            temporal,
            spatial,
        },
        stats: capture.then_some(BlockStats {
            temporal: tstats,
            spatial: sstats,
        }),
    })
}

/// Output of a full encode.
#[derive(Debug, Clone)]
pub struct EncodedVideo {
    pub grid: TokenGrid,
    pub cls: Vec<f32>,
    pub trajectory: Trajectory,
    /// Input-grid shape, then the shape after each block.
    pub shapes: Vec<(usize, usize)>,
}

impl EncodedVideo {
    pub fn final_tokens(&self) -> usize {
        self.grid.num_tokens()
    }

    /// Final features, sizes and `[CLS]` as named tensors.
    pub fn to_tensor_file(&self) -> TensorFile {
        let g = &self.grid;
        let mut f = TensorFile::default();
        f.push(NamedTensor::new(
            "features",
            vec![g.num_frames, g.patches, g.dim],
            g.features.clone(),
        ));
        f.push(NamedTensor::new(
            "token_size",
            vec![g.num_frames, g.patches],
            g.token_size.iter().map(|&s| s as f32).collect(),
        ));
        f.push(NamedTensor::new(
            "frame_size",
            vec![g.num_frames],
            g.frame_size.iter().map(|&s| s as f32).collect(),
        ));
        f.push(NamedTensor::new("cls", vec![g.dim], self.cls.clone()));
        f
    }
}

/// Patchify and embed a video for `cfg`, checking its dimensions.
pub fn embed_video(
    video: &RawVideo,
    cfg: &EncoderConfig,
    weights: &ModelWeights,
) -> Result<TokenGrid> {
    if (video.frames, video.height, video.width) != (cfg.frames, cfg.height, cfg.width) {
        return Err(TestaError::Config(vec![format!(
            "video is {}x{}x{}, config expects {}x{}x{}",
            video.frames, video.height, video.width, cfg.frames, cfg.height, cfg.width
        )]));
    }
    embed(&patchify(video, cfg.patch)?, &weights.embedding)
}

/// Encode a video. The config is validated before any compute.
pub fn encode(
    video: &RawVideo,
    cfg: &EncoderConfig,
    weights: &ModelWeights,
) -> Result<EncodedVideo> {
    encode_with(video, cfg, weights, |_, _| {})
}

/// [`encode`] with a callback seeing every block's output, statistics
/// included.
pub fn encode_with(
    video: &RawVideo,
    cfg: &EncoderConfig,
    weights: &ModelWeights,
    mut on_block: impl FnMut(usize, &BlockOutput),
) -> Result<EncodedVideo> {
    cfg.validate()?;
    if weights.blocks.len() != cfg.blocks {
        return Err(TestaError::Config(vec![format!(
            "blocks: config has {} but weights have {}",
            cfg.blocks,
            weights.blocks.len()
        )]));
    }
    let mut grid = embed_video(video, cfg, weights)?;
    let mut trajectory = Trajectory::new(grid.num_frames, grid.patches);
    let mut shapes = vec![(grid.num_frames, grid.patches)];
    for (i, w) in weights.blocks.iter().enumerate() {
        let out = encode_block(&grid, w, cfg, true)?;
        on_block(i, &out);
        grid = out.grid;
        trajectory.blocks.push(out.record);
        shapes.push((grid.num_frames, grid.patches));
    }
    Ok(EncodedVideo {
        cls: grid.cls.clone(),
        grid,
        trajectory,
        shapes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Strategy;
    use rand::Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            frames: 6,
            height: 16,
            width: 16,
            patch: 4,
            dim: 16,
            heads: 2,
            blocks: 2,
            rt: 1,
            rs: 3,
            ..EncoderConfig::default_for(6)
        }
    }

    fn video(cfg: &EncoderConfig, seed: u64) -> RawVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.frames * cfg.height * cfg.width * 3;
        RawVideo::new(
            cfg.frames,
            cfg.height,
            cfg.width,
            (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn block_reduces_both_dimensions() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg).unwrap();
        let g = embed_video(&video(&cfg, 1), &cfg, &w).unwrap();
        let out = encode_block(&g, &w.blocks[0], &cfg, false).unwrap();
        assert_eq!((out.grid.num_frames, out.grid.patches), (5, 13));
        let only_spatial = EncoderConfig { rt: 0, ..cfg };
        let out = encode_block(&g, &w.blocks[0], &only_spatial, false).unwrap();
        assert_eq!((out.grid.num_frames, out.grid.patches), (6, 13));
        assert!(out.record.temporal.is_none());
    }

    #[test]
    fn recorded_plans_replay_from_captured_stats() {
        for strategy in [Strategy::Geometry, Strategy::Importance] {
            for spatial_plan in [SpatialPlanMode::Shared, SpatialPlanMode::PerFrame] {
                let cfg = EncoderConfig {
                    strategy,
                    spatial_plan,
                    ..small_cfg()
                };
                let w = ModelWeights::init(&cfg).unwrap();
                let g = embed_video(&video(&cfg, 2), &cfg, &w).unwrap();
                let out = encode_block(&g, &w.blocks[0], &cfg, true).unwrap();
                let stats = out.stats.unwrap();
                assert_eq!(
                    out.record.temporal,
                    Some(temporal_reduction(&stats.temporal, 1, &cfg).unwrap())
                );
                assert_eq!(
                    out.record.spatial,
                    Some(spatial_reduction(&stats.spatial, 3, &cfg).unwrap())
                );
            }
        }
    }

    #[test]
    fn mismatched_video_rejected_before_compute() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg).unwrap();
        let v = RawVideo::zeros(5, 16, 16);
        assert!(matches!(encode(&v, &cfg, &w), Err(TestaError::Config(_))));
        let bad = EncoderConfig {
            rs: 9,
            ..small_cfg()
        };
        assert!(matches!(
            encode(&video(&cfg, 3), &bad, &w),
            Err(TestaError::Config(_))
        ));
    }

    #[test]
    fn weights_file_round_trip() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg).unwrap();
        let f = w.to_tensor_file();
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        let back = ModelWeights::from_tensor_file(&TensorFile::read(&mut &buf[..]).unwrap(), &cfg)
            .unwrap();
        assert_eq!(back, w);
        let other = EncoderConfig { dim: 8, ..cfg };
        assert!(ModelWeights::from_tensor_file(&f, &other).is_err());
    }

    #[test]
    fn pruning_run_drops_mass() {
        let cfg = EncoderConfig {
            reduction: ReductionMethod::Prune,
            ..small_cfg()
        };
        let w = ModelWeights::init(&cfg).unwrap();
        let enc = encode(&video(&cfg, 4), &cfg, &w).unwrap();
        assert_eq!(enc.shapes.last(), Some(&(4, 10)));
        assert!(enc.grid.total_constituents() < (6 * 16) as f64);
        assert!(enc.grid.token_size.iter().all(|&s| s == 1.0));
    }
}
