//! Merge trajectories: recording, group recovery, mask rendering and
//! similarity probing.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{Candidate, Dimension, Reduction};
use crate::error::{Result, TestaError};

/// Spatial reductions of one block: a single plan for all frames or one
/// per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "plans", rename_all = "kebab-case")]
pub enum SpatialReduction {
    Shared(Reduction),
    PerFrame(Vec<Reduction>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub frames_in: usize,
    pub patches_in: usize,
    pub temporal: Option<Reduction>,
    pub spatial: Option<SpatialReduction>,
}

/// Every reduction applied while encoding, block by block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: usize,
    pub patches: usize,
    pub blocks: Vec<BlockRecord>,
}

impl Trajectory {
    pub fn new(frames: usize, patches: usize) -> Self {
        Self {
            frames,
            patches,
            blocks: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub type Cell = (usize, usize);

/// Original `(frame, patch)` cells behind every final token.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMap {
    pub frames: usize,
    pub patches: usize,
    /// Frame-major over final tokens; each group sorted.
    pub token_groups: Vec<Vec<Cell>>,
    /// Original frame indices merged into each final frame, sorted.
    pub frame_groups: Vec<Vec<usize>>,
    /// Cells removed by pruning.
    pub dropped: Vec<Cell>,
}

impl GroupMap {
    pub fn group(&self, t: usize, l: usize) -> &[Cell] {
        &self.token_groups[t * self.patches + l]
    }

    /// Disjointness and coverage of the original `frames × patches` grid,
    /// counting pruned cells as covered.
    pub fn check_partition(&self, frames: usize, patches: usize) -> Result<()> {
        let mut seen = vec![false; frames * patches];
        let all = self.token_groups.iter().flatten().chain(&self.dropped);
        for &(t, l) in all {
            if t >= frames || l >= patches {
                return Err(TestaError::Integrity(format!(
                    "cell ({t},{l}) outside {frames}x{patches}"
                )));
            }
            if std::mem::replace(&mut seen[t * patches + l], true) {
                return Err(TestaError::Integrity(format!(
                    "cell ({t},{l}) appears twice"
                )));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TestaError::Integrity(format!(
                "cell ({},{}) is not covered",
                i / patches,
                i % patches
            )));
        }
        Ok(())
    }

    /// `t' ℓ' : (t,ℓ) (t,ℓ) …`, one line per final token.
    pub fn index_text(&self) -> String {
        let mut s = String::new();
        for t in 0..self.frames {
            for l in 0..self.patches {
                let _ = write!(s, "{t} {l} :");
                for &(a, b) in self.group(t, l) {
                    let _ = write!(s, " ({a},{b})");
                }
                s.push('\n');
            }
        }
        s
    }

    /// `t' : t t …`, one line per final frame.
    pub fn frame_index_text(&self) -> String {
        let mut s = String::new();
        for (t, g) in self.frame_groups.iter().enumerate() {
            let _ = write!(s, "{t} :");
            for f in g {
                let _ = write!(s, " {f}");
            }
            s.push('\n');
        }
        s
    }
}

/// Replay a trajectory over index sets.
pub fn recover_groups(traj: &Trajectory, frames: usize, patches: usize) -> Result<GroupMap> {
    if traj.frames != frames || traj.patches != patches {
        return Err(TestaError::Integrity(format!(
            "trajectory starts at {}x{}, expected {frames}x{patches}",
            traj.frames, traj.patches
        )));
    }
    // cells[t][l] = original cells held by the token at (t, l)
    let mut cells: Vec<Vec<Vec<Cell>>> = (0..frames)
        .map(|t| (0..patches).map(|l| vec![(t, l)]).collect())
        .collect();
    let mut frame_groups: Vec<Vec<usize>> = (0..frames).map(|t| vec![t]).collect();
    let mut dropped: Vec<Cell> = Vec::new();

    for (bi, block) in traj.blocks.iter().enumerate() {
        let (t_now, l_now) = (cells.len(), cells.first().map_or(0, Vec::len));
        if block.frames_in != t_now || block.patches_in != l_now {
            return Err(TestaError::Integrity(format!(
                "block {bi} recorded input {}x{} but replay reached {t_now}x{l_now}",
                block.frames_in, block.patches_in
            )));
        }
        if let Some(red) = &block.temporal {
            check_len(red, t_now, bi, "temporal")?;
            match red {
                Reduction::Merge(p) => {
                    let groups = p.groups();
                    cells = groups
                        .iter()
                        .map(|g| {
                            (0..l_now)
                                .map(|l| {
                                    g.iter()
                                        .flat_map(|&t| cells[t][l].iter().copied())
                                        .collect()
                                })
                                .collect()
                        })
                        .collect();
                    frame_groups = groups
                        .iter()
                        .map(|g| {
                            g.iter()
                                .flat_map(|&t| frame_groups[t].iter().copied())
                                .collect()
                        })
                        .collect();
                }
                Reduction::Prune(p) => {
                    for &t in &p.removed {
                        dropped.extend(cells[t].iter().flatten().copied());
                    }
                    cells = p.kept_order.iter().map(|&t| cells[t].clone()).collect();
                    frame_groups = p
                        .kept_order
                        .iter()
                        .map(|&t| frame_groups[t].clone())
                        .collect();
                }
            }
        }
        if let Some(sp) = &block.spatial {
            let t_now = cells.len();
            let plans: Vec<&Reduction> = match sp {
                SpatialReduction::Shared(r) => vec![r; t_now],
                SpatialReduction::PerFrame(rs) => {
                    if rs.len() != t_now {
                        return Err(TestaError::Integrity(format!(
                            "block {bi}: {} per-frame plans for {t_now} frames",
                            rs.len()
                        )));
                    }
                    rs.iter().collect()
                }
            };
            let out_len = plans.first().map(|r| r.output_len());
            for (frame, red) in cells.iter_mut().zip(plans) {
                check_len(red, l_now, bi, "spatial")?;
                if Some(red.output_len()) != out_len {
                    return Err(TestaError::Integrity(format!(
                        "block {bi}: uneven per-frame reductions"
                    )));
                }
                match red {
                    Reduction::Merge(p) => {
                        *frame = p
                            .groups()
                            .iter()
                            .map(|g| g.iter().flat_map(|&l| frame[l].iter().copied()).collect())
                            .collect();
                    }
                    Reduction::Prune(p) => {
                        for &l in &p.removed {
                            dropped.extend(frame[l].iter().copied());
                        }
                        *frame = p.kept_order.iter().map(|&l| frame[l].clone()).collect();
                    }
                }
            }
        }
    }

    let final_t = cells.len();
    let final_l = cells.first().map_or(0, Vec::len);
    let mut token_groups: Vec<Vec<Cell>> = cells.into_iter().flatten().collect();
    token_groups.iter_mut().for_each(|g| g.sort_unstable());
    frame_groups.iter_mut().for_each(|g| g.sort_unstable());
    dropped.sort_unstable();
    let map = GroupMap {
        frames: final_t,
        patches: final_l,
        token_groups,
        frame_groups,
        dropped,
    };
    map.check_partition(frames, patches)?;
    Ok(map)
}

fn check_len(red: &Reduction, n: usize, block: usize, what: &str) -> Result<()> {
    if red.n() != n {
        return Err(TestaError::Integrity(format!(
            "block {block}: {what} plan expects {} tokens, replay has {n}",
            red.n()
        )));
    }
    match red {
        Reduction::Merge(p) => p
            .validate(n)
            .map_err(|e| TestaError::Integrity(format!("block {block}: {e}"))),
        Reduction::Prune(p) => p
            .validate()
            .map_err(|e| TestaError::Integrity(format!("block {block}: {e}"))),
    }
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    /// Binary portable pixmap: `P6\n<w> <h>\n255\n` followed by RGB bytes.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    /// RGBA bytes, for canvas `ImageData`.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.rgb
            .chunks_exact(3)
            .flat_map(|c| [c[0], c[1], c[2], 255])
            .collect()
    }
}

const MASK24: u32 = 0x00FF_FFFF;

/// Colour for a group id. Every step is a bijection on 24-bit values, so
/// distinct ids below 2^24 always get distinct colours.
pub fn palette(id: usize, seed: u64) -> [u8; 3] {
    let salt = (seed ^ (seed >> 24) ^ (seed >> 48)) as u32;
    let mut x = (id as u32).wrapping_add(salt) & MASK24;
    x = x.wrapping_mul(0x9E37_79B1 | 1) & MASK24;
    x ^= x >> 11;
    x = x.wrapping_mul(0x85EB_CA6B | 1) & MASK24;
    x ^= x >> 13;
    [(x >> 16) as u8, (x >> 8) as u8, x as u8]
}

const BORDER_SALT: u64 = 0x5EED_B0D3;

/// One mask per final frame. Each original patch tile of the frame group's
/// first frame is filled with the colour of the final token it ended up in,
/// with a one-pixel border in a second colour of the same token. Pruned
/// tiles stay black.
pub fn render_masks(
    groups: &GroupMap,
    height: usize,
    width: usize,
    patch: usize,
    seed: u64,
) -> Vec<Image> {
    let per_row = width / patch;
    let tiles = per_row * (height / patch);
    (0..groups.frames)
        .map(|ft| {
            let rep = groups.frame_groups[ft][0];
            let mut owner: Vec<Option<usize>> = vec![None; tiles];
            for fl in 0..groups.patches {
                for &(t, l) in groups.group(ft, fl) {
                    if t == rep && l < tiles {
                        owner[l] = Some(fl);
                    }
                }
            }
            let mut img = Image::new(width, height);
            for (tile, o) in owner.iter().enumerate() {
                let Some(id) = *o else { continue };
                let inner = palette(id, seed);
                let border = palette(id, seed ^ BORDER_SALT);
                let (y0, x0) = ((tile / per_row) * patch, (tile % per_row) * patch);
                for dy in 0..patch {
                    for dx in 0..patch {
                        let edge = patch >= 3
                            && (dy == 0 || dx == 0 || dy == patch - 1 || dx == patch - 1);
                        img.put(x0 + dx, y0 + dy, if edge { border } else { inner });
                    }
                }
            }
            img
        })
        .collect()
}

/// Write `frame_NNN.ppm` per final frame plus `groups.txt` (token index) and
/// `frames.txt` (frame index). Returns the paths written.
pub fn write_masks(dir: &Path, groups: &GroupMap, images: &[Image]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let path = dir.join(format!("frame_{i:03}.ppm"));
        std::fs::File::create(&path)?.write_all(&img.to_ppm())?;
        written.push(path);
    }
    for (name, text) in [
        ("groups.txt", groups.index_text()),
        ("frames.txt", groups.frame_index_text()),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// Mean key similarity of matched A–B pairs in one block and dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub block: usize,
    pub dimension: Dimension,
    pub merged_pairs: usize,
    pub merged_mean: Option<f64>,
    pub unmerged_pairs: usize,
    pub unmerged_mean: Option<f64>,
}

fn probe_row(block: usize, dimension: Dimension, cands: &[&Candidate]) -> ProbeRow {
    let mean = |merged: bool| {
        let v: Vec<f64> = cands
            .iter()
            .filter(|c| c.merged == merged)
            .map(|c| c.similarity as f64)
            .collect();
        (
            v.len(),
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
        )
    };
    let (merged_pairs, merged_mean) = mean(true);
    let (unmerged_pairs, unmerged_mean) = mean(false);
    ProbeRow {
        block,
        dimension,
        merged_pairs,
        merged_mean,
        unmerged_pairs,
        unmerged_mean,
    }
}

/// Per block, split matched pairs into merged and unmerged and average their
/// similarities, separately for frame and patch tokens. Per-frame spatial
/// plans are pooled.
pub fn similarity_probe(traj: &Trajectory) -> Vec<ProbeRow> {
    let mut rows = Vec::new();
    for (bi, block) in traj.blocks.iter().enumerate() {
        if let Some(Reduction::Merge(p)) = &block.temporal {
            rows.push(probe_row(
                bi + 1,
                Dimension::Temporal,
                &p.candidates.iter().collect::<Vec<_>>(),
            ));
        }
        let spatial: Vec<&Reduction> = match &block.spatial {
            Some(SpatialReduction::Shared(r)) => vec![r],
            Some(SpatialReduction::PerFrame(rs)) => rs.iter().collect(),
            None => vec![],
        };
        let cands: Vec<&Candidate> = spatial
            .iter()
            .filter_map(|r| match r {
                Reduction::Merge(p) => Some(p.candidates.iter()),
                Reduction::Prune(_) => None,
            })
            .flatten()
            .collect();
        if !cands.is_empty() {
            rows.push(probe_row(bi + 1, Dimension::Spatial, &cands));
        }
    }
    rows
}

pub fn probe_csv(rows: &[ProbeRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "block",
        "tokens",
        "merged_pairs",
        "merged_mean_sim",
        "unmerged_pairs",
        "unmerged_mean_sim",
    ])?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        let tokens = match r.dimension {
            Dimension::Temporal => "frame",
            Dimension::Spatial => "patch",
        };
        w.write_record([
            r.block.to_string(),
            tokens.to_string(),
            r.merged_pairs.to_string(),
            fmt(r.merged_mean),
            r.unmerged_pairs.to_string(),
            fmt(r.unmerged_mean),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| TestaError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{Candidate, MergePlan, PrunePlan};

    fn merge(n: usize, pairs: &[(usize, usize)]) -> Reduction {
        let cands = pairs
            .iter()
            .map(|&(src, dst)| Candidate {
                src,
                dst,
                similarity: 0.5,
                merged: true,
            })
            .collect();
        Reduction::Merge(MergePlan::from_candidates(n, cands).unwrap())
    }

    #[test]
    fn single_temporal_merge_replay() {
        let mut tr = Trajectory::new(4, 2);
        tr.blocks.push(BlockRecord {
            frames_in: 4,
            patches_in: 2,
            temporal: Some(merge(4, &[(1, 2)])),
            spatial: None,
        });
        let g = recover_groups(&tr, 4, 2).unwrap();
        assert_eq!(g.frame_groups, vec![vec![0], vec![1, 2], vec![3]]);
        assert_eq!(g.group(1, 1), &[(1, 1), (2, 1)]);
        assert_eq!(g.frames, 3);
    }

    #[test]
    fn no_merges_means_singletons() {
        let g = recover_groups(&Trajectory::new(2, 3), 2, 3).unwrap();
        assert!(g.token_groups.iter().all(|c| c.len() == 1));
        assert_eq!(g.index_text().lines().next(), Some("0 0 : (0,0)"));
    }

    #[test]
    fn inconsistent_trajectory_is_rejected() {
        let mut tr = Trajectory::new(4, 2);
        tr.blocks.push(BlockRecord {
            frames_in: 4,
            patches_in: 2,
            temporal: Some(merge(4, &[(0, 1)])),
            spatial: None,
        });
        tr.blocks.push(BlockRecord {
            frames_in: 4,
            patches_in: 2,
            temporal: None,
            spatial: None,
        });
        assert!(matches!(
            recover_groups(&tr, 4, 2),
            Err(TestaError::Integrity(_))
        ));
        let mut tr = Trajectory::new(4, 2);
        tr.blocks.push(BlockRecord {
            frames_in: 4,
            patches_in: 2,
            temporal: None,
            spatial: Some(SpatialReduction::Shared(merge(3, &[(0, 1)]))),
        });
        assert!(matches!(
            recover_groups(&tr, 4, 2),
            Err(TestaError::Integrity(_))
        ));
    }

    #[test]
    fn pruned_cells_are_accounted() {
        let mut tr = Trajectory::new(2, 2);
        tr.blocks.push(BlockRecord {
            frames_in: 2,
            patches_in: 2,
            temporal: None,
            spatial: Some(SpatialReduction::Shared(Reduction::Prune(PrunePlan {
                n: 2,
                removed: vec![0],
                kept_order: vec![1],
            }))),
        });
        let g = recover_groups(&tr, 2, 2).unwrap();
        assert_eq!(g.dropped, vec![(0, 0), (1, 0)]);
        assert_eq!(g.token_groups, vec![vec![(0, 1)], vec![(1, 1)]]);
    }

    #[test]
    fn palette_is_injective_over_small_ids() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..5000 {
            assert!(seen.insert(palette(id, 17)));
        }
        assert_eq!(palette(3, 9), palette(3, 9));
    }

    #[test]
    fn masks_color_groups() {
        // 1 frame, 2x2 tiles of 4 px; merge tile 0 into tile 1
        let mut tr = Trajectory::new(1, 4);
        tr.blocks.push(BlockRecord {
            frames_in: 1,
            patches_in: 4,
            temporal: None,
            spatial: Some(SpatialReduction::Shared(merge(4, &[(0, 1)]))),
        });
        let g = recover_groups(&tr, 1, 4).unwrap();
        let imgs = render_masks(&g, 8, 8, 4, 1);
        assert_eq!(imgs.len(), 1);
        let centre = |tile: usize| imgs[0].pixel((tile % 2) * 4 + 1, (tile / 2) * 4 + 1);
        assert_eq!(centre(0), centre(1));
        assert_ne!(centre(1), centre(2));
        assert_ne!(centre(2), centre(3));
        assert_ne!(imgs[0].pixel(0, 0), centre(0));
        assert!(imgs[0].to_ppm().starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(imgs[0].to_ppm().len(), 11 + 8 * 8 * 3);
    }

    #[test]
    fn singleton_masks_all_distinct() {
        let g = recover_groups(&Trajectory::new(1, 16), 1, 16).unwrap();
        let img = &render_masks(&g, 16, 16, 4, 5)[0];
        let mut colors: Vec<[u8; 3]> = (0..16)
            .map(|t| img.pixel((t % 4) * 4 + 2, (t / 4) * 4 + 2))
            .collect();
        colors.sort_unstable();
        colors.dedup();
        assert_eq!(colors.len(), 16);
    }

    #[test]
    fn probe_splits_merged_and_unmerged() {
        let cands = vec![
            Candidate {
                src: 0,
                dst: 1,
                similarity: 0.9,
                merged: true,
            },
            Candidate {
                src: 2,
                dst: 3,
                similarity: 0.2,
                merged: false,
            },
            Candidate {
                src: 4,
                dst: 3,
                similarity: 0.4,
                merged: false,
            },
        ];
        let mut tr = Trajectory::new(5, 1);
        tr.blocks.push(BlockRecord {
            frames_in: 5,
            patches_in: 1,
            temporal: Some(Reduction::Merge(
                MergePlan::from_candidates(5, cands).unwrap(),
            )),
            spatial: None,
        });
        let rows = similarity_probe(&tr);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].merged_pairs, 1);
        assert!((rows[0].merged_mean.unwrap() - 0.9).abs() < 1e-6);
        assert!((rows[0].unmerged_mean.unwrap() - 0.3).abs() < 1e-6);
        let csv = probe_csv(&rows).unwrap();
        assert!(csv.starts_with("block,tokens,merged_pairs"));
        assert!(csv.contains("1,frame,1,0.900000,2,0.300000"));
    }
}
