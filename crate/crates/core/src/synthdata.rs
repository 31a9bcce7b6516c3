//! Synthetic clips with planted redundancy.
//!
//! Frames are grouped into segments and patch tiles into regions. Every
//! `(segment, region)` pair is a cluster with its own base colour, so the
//! ideal merge never mixes cells from two clusters.
//!
//! Truth sidecar format, one `key values…` line each:
//!
//! ```text
//! frames 8
//! height 32
//! width 32
//! patch 8
//! sigma 0.02
//! segments 0 0 0 0 1 1 1 1
//! regions 0 0 1 1 0 0 1 1 2 2 3 3 2 2 3 3
//! color 0.9 0.1 0.1
//! color …            (segment-major, one line per cluster)
//! ```

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TestaError};
use crate::tokenization::{patch_count, RawVideo};
use crate::trajectory::GroupMap;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Segment label of each frame.
    pub segments: Vec<usize>,
    /// Region label of each patch tile, raster order.
    pub regions: Vec<usize>,
    /// RGB per cluster, index `segment * num_regions + region`.
    pub colors: Vec<[f32; 3]>,
    pub sigma: f32,
}

fn label_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

impl PlantedSpec {
    /// Contiguous equal-ish segments and a `rows × cols` grid of rectangular
    /// regions. Colours are drawn from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn grid(
        frames: usize,
        height: usize,
        width: usize,
        patch: usize,
        num_segments: usize,
        region_grid: (usize, usize),
        sigma: f32,
        seed: u64,
    ) -> Result<Self> {
        let n = patch_count(height, width, patch)?;
        let (gh, gw) = (height / patch, width / patch);
        let (rr, rc) = region_grid;
        if num_segments == 0 || num_segments > frames || rr == 0 || rc == 0 || rr > gh || rc > gw {
            return Err(TestaError::Config(vec![format!(
                "cannot split {frames} frames into {num_segments} segments and a {gh}x{gw} tile grid into {rr}x{rc} regions"
            )]));
        }
        let segments = (0..frames).map(|t| t * num_segments / frames).collect();
        let regions = (0..n)
            .map(|i| (i / gw) * rr / gh * rc + (i % gw) * rc / gw)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let colors = (0..num_segments * rr * rc)
            .map(|_| {
                [
                    rng.random::<f32>(),
                    rng.random::<f32>(),
                    rng.random::<f32>(),
                ]
            })
            .collect();
        let spec = Self {
            frames,
            height,
            width,
            patch,
            segments,
            regions,
            colors,
            sigma,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_segments(&self) -> usize {
        label_count(&self.segments)
    }

    pub fn num_regions(&self) -> usize {
        label_count(&self.regions)
    }

    pub fn patches(&self) -> usize {
        self.regions.len()
    }

    pub fn cluster(&self, t: usize, l: usize) -> usize {
        self.segments[t] * self.num_regions() + self.regions[l]
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        match patch_count(self.height, self.width, self.patch) {
            Ok(n) if n != self.regions.len() => errs.push(format!(
                "regions: {} labels for {n} patch tiles",
                self.regions.len()
            )),
            Err(e) => errs.push(e.to_string()),
            _ => {}
        }
        if self.segments.len() != self.frames || self.frames == 0 {
            errs.push(format!(
                "segments: {} labels for {} frames",
                self.segments.len(),
                self.frames
            ));
        }
        for (name, labels) in [("segments", &self.segments), ("regions", &self.regions)] {
            let k = label_count(labels);
            if let Some(missing) = (0..k).find(|c| !labels.contains(c)) {
                errs.push(format!("{name}: label {missing} is unused"));
            }
        }
        let clusters = self.num_segments() * self.num_regions();
        if self.colors.len() != clusters {
            errs.push(format!(
                "colors: {} given for {clusters} clusters",
                self.colors.len()
            ));
        }
        if self
            .colors
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            errs.push("colors: channels must lie in [0, 1]".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            errs.push(format!("sigma: {} is not a finite value >= 0", self.sigma));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TestaError::Config(errs))
        }
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "frames {}", self.frames);
        let _ = writeln!(s, "height {}", self.height);
        let _ = writeln!(s, "width {}", self.width);
        let _ = writeln!(s, "patch {}", self.patch);
        let _ = writeln!(s, "sigma {}", self.sigma);
        let _ = writeln!(s, "segments {}", join(&self.segments));
        let _ = writeln!(s, "regions {}", join(&self.regions));
        for [r, g, b] in &self.colors {
            let _ = writeln!(s, "color {r} {g} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| TestaError::Format(format!("truth file: {msg}"));
        let mut spec = Self {
            frames: 0,
            height: 0,
            width: 0,
            patch: 0,
            segments: Vec::new(),
            regions: Vec::new(),
            colors: Vec::new(),
            sigma: 0.0,
        };
        for (no, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let vals: Vec<&str> = parts.collect();
            let ints = || -> Result<Vec<usize>> {
                vals.iter()
                    .map(|v| {
                        v.parse()
                            .map_err(|_| bad(format!("line {}: bad integer {v:?}", no + 1)))
                    })
                    .collect()
            };
            let one = || -> Result<usize> {
                match ints()?.as_slice() {
                    [v] => Ok(*v),
                    _ => Err(bad(format!("line {}: {key} takes one value", no + 1))),
                }
            };
            match key {
                "frames" => spec.frames = one()?,
                "height" => spec.height = one()?,
                "width" => spec.width = one()?,
                "patch" => spec.patch = one()?,
                "segments" => spec.segments = ints()?,
                "regions" => spec.regions = ints()?,
                "sigma" | "color" => {
                    let f: Vec<f32> = vals
                        .iter()
                        .map(|v| {
                            v.parse()
                                .map_err(|_| bad(format!("line {}: bad number {v:?}", no + 1)))
                        })
                        .collect::<Result<_>>()?;
                    match (key, f.as_slice()) {
                        ("sigma", [s]) => spec.sigma = *s,
                        ("color", [r, g, b]) => spec.colors.push([*r, *g, *b]),
                        _ => {
                            return Err(bad(format!(
                                "line {}: wrong number of values for {key}",
                                no + 1
                            )))
                        }
                    }
                }
                other => return Err(bad(format!("line {}: unknown key {other:?}", no + 1))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Pixel = cluster colour + uniform noise in `[-σ, σ]`, clamped to `[0, 1]`.
pub fn generate(spec: &PlantedSpec, seed: u64) -> Result<RawVideo> {
    spec.validate()?;
    let (h, w, p) = (spec.height, spec.width, spec.patch);
    let gw = w / p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut video = RawVideo::zeros(spec.frames, h, w);
    for t in 0..spec.frames {
        for y in 0..h {
            for x in 0..w {
                let base = spec.colors[spec.cluster(t, (y / p) * gw + x / p)];
                for (c, &v) in base.iter().enumerate() {
                    let noise = if spec.sigma > 0.0 {
                        rng.random_range(-spec.sigma..=spec.sigma)
                    } else {
                        0.0
                    };
                    let i = video.index(t, y, x, c);
                    video.pixels[i] = (v + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(video)
}

/// Share of original cells whose group majority cluster matches their own.
/// Pruned cells count against purity.
pub fn score_purity(groups: &GroupMap, truth: &PlantedSpec) -> Result<f64> {
    if truth.frames == 0 || truth.patches() == 0 {
        return Err(TestaError::Empty("truth grid"));
    }
    groups.check_partition(truth.frames, truth.patches())?;
    let clusters = truth.colors.len();
    let mut counts = vec![0usize; clusters];
    let mut pure = 0usize;
    for g in &groups.token_groups {
        counts.iter_mut().for_each(|c| *c = 0);
        for &(t, l) in g {
            counts[truth.cluster(t, l)] += 1;
        }
        pure += counts.iter().max().copied().unwrap_or(0);
    }
    Ok(pure as f64 / (truth.frames * truth.patches()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::cosine_sim_matrix;
    use crate::tokenization::{embed, frame_tokens, patchify, EmbeddingWeights};

    fn small(sigma: f32) -> PlantedSpec {
        PlantedSpec::grid(8, 32, 32, 8, 2, (2, 2), sigma, 5).unwrap()
    }

    fn groups_of(
        frames: usize,
        patches: usize,
        token_groups: Vec<Vec<(usize, usize)>>,
    ) -> GroupMap {
        GroupMap {
            frames,
            patches,
            token_groups,
            frame_groups: Vec::new(),
            dropped: Vec::new(),
        }
    }

    #[test]
    fn grid_layout() {
        let s = small(0.0);
        assert_eq!(s.segments, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(
            s.regions,
            vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
        );
        assert_eq!(s.colors.len(), 8);
        assert!(PlantedSpec::grid(8, 32, 32, 8, 9, (2, 2), 0.0, 5).is_err());
    }

    #[test]
    fn noiseless_single_cluster_is_constant() {
        let mut s = PlantedSpec::grid(3, 16, 16, 8, 1, (1, 1), 0.0, 1).unwrap();
        s.colors = vec![[0.25, 0.5, 0.75]];
        let v = generate(&s, 9).unwrap();
        for px in v.pixels.chunks(3) {
            assert_eq!(px, [0.25, 0.5, 0.75]);
        }
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let s = small(0.05);
        let a = generate(&s, 1).unwrap();
        assert_eq!(a, generate(&s, 1).unwrap());
        assert_ne!(a, generate(&s, 2).unwrap());
        let clean = generate(&small(0.0), 1).unwrap();
        for (x, c) in a.pixels.iter().zip(&clean.pixels) {
            assert!((0.0..=1.0).contains(x));
            assert!((x - c).abs() <= 0.05 + 1e-6);
        }
    }

    #[test]
    fn segments_separate_after_embedding() {
        let s = PlantedSpec::grid(6, 32, 32, 8, 2, (1, 1), 0.02, 3).unwrap();
        let v = generate(&s, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = EmbeddingWeights::init(8, 16, 6, 32, &mut rng);
        w.zero_positional();
        let grid = embed(&patchify(&v, 8).unwrap(), &w).unwrap();
        let sim = cosine_sim_matrix(&frame_tokens(&grid), &frame_tokens(&grid)).unwrap();
        let (mut same, mut cross) = (f32::INFINITY, f32::NEG_INFINITY);
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    continue;
                }
                if s.segments[i] == s.segments[j] {
                    same = same.min(sim.get(i, j));
                } else {
                    cross = cross.max(sim.get(i, j));
                }
            }
        }
        assert!(cross < same, "cross {cross} vs same {same}");
    }

    #[test]
    fn purity_definitions() {
        let s = small(0.0);
        let singles = (0..8)
            .flat_map(|t| (0..16).map(move |l| vec![(t, l)]))
            .collect();
        assert_eq!(score_purity(&groups_of(8, 16, singles), &s).unwrap(), 1.0);

        // a single group holding all cells: the largest cluster wins
        let all: Vec<_> = (0..8).flat_map(|t| (0..16).map(move |l| (t, l))).collect();
        assert_eq!(
            score_purity(&groups_of(1, 1, vec![all]), &s).unwrap(),
            16.0 / 128.0
        );

        // two equal clusters in one group contribute half their cells
        let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
        let mut mixed = vec![(0, 0), (0, 2)];
        mixed.sort();
        groups.push(mixed);
        for t in 0..8 {
            for l in 0..16 {
                if !(t == 0 && (l == 0 || l == 2)) {
                    groups.push(vec![(t, l)]);
                }
            }
        }
        assert_eq!(
            score_purity(&groups_of(1, groups.len(), groups), &s).unwrap(),
            127.0 / 128.0
        );
    }

    #[test]
    fn purity_rejects_bad_partition() {
        let s = small(0.0);
        assert!(score_purity(&groups_of(1, 1, vec![vec![(0, 0)]]), &s).is_err());
    }

    #[test]
    fn truth_text_round_trip() {
        let s = small(0.125);
        let back = PlantedSpec::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert!(PlantedSpec::from_text("frames 2\nbogus 1\n").is_err());
        let mut broken = s.clone();
        broken.sigma = -1.0;
        assert!(broken.validate().is_err());
    }
}
