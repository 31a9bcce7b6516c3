//! Raw video → patch tokens → embedded [`TokenGrid`].

use rand::Rng;

use crate::error::{Result, TestaError};
use crate::tensors::{matmul, Matrix};

/// `T` RGB frames of `H × W` pixels, stored `(t, y, x, channel)` with
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl RawVideo {
    pub const CHANNELS: usize = 3;

    pub fn new(frames: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        let want = frames * height * width * Self::CHANNELS;
        if pixels.len() != want {
            return Err(TestaError::shape(
                "RawVideo::new",
                format!(
                    "{frames}x{height}x{width}x3 needs {want} values, got {}",
                    pixels.len()
                ),
            ));
        }
        Ok(Self {
            frames,
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            pixels: vec![0.0; frames * height * width * Self::CHANNELS],
        }
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * Self::CHANNELS + c
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * Self::CHANNELS;
        &self.pixels[t * n..(t + 1) * n]
    }

    /// Uniformly sample `n` frames (`floor(i·T/n)`), as when a clip is drawn
    /// from a longer video.
    pub fn sample_frames(&self, n: usize) -> Result<RawVideo> {
        if n == 0 || n > self.frames {
            return Err(TestaError::shape(
                "sample_frames",
                format!("cannot sample {n} of {} frames", self.frames),
            ));
        }
        let mut pixels = Vec::with_capacity(n * self.frame(0).len());
        for i in 0..n {
            pixels.extend_from_slice(self.frame(i * self.frames / n));
        }
        RawVideo::new(n, self.height, self.width, pixels)
    }
}

/// Number of `P × P` tiles in an `H × W` frame, or an error when the frame
/// does not tile exactly.
pub fn patch_count(height: usize, width: usize, patch: usize) -> Result<usize> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || height == 0 || width == 0 {
        return Err(TestaError::shape(
            "patchify",
            format!("{height}x{width} frame is not divisible into {patch}x{patch} patches"),
        ));
    }
    Ok((height / patch) * (width / patch))
}

/// Split every frame into raster-ordered `P × P` tiles. Each tile is one row
/// of the per-frame matrix, flattened `(dy, dx, channel)`.
pub fn patchify(video: &RawVideo, patch: usize) -> Result<Vec<Matrix>> {
    let l = patch_count(video.height, video.width, patch)?;
    let per_row = video.width / patch;
    let width = 3 * patch * patch;
    let mut frames = Vec::with_capacity(video.frames);
    for t in 0..video.frames {
        let mut data = Vec::with_capacity(l * width);
        for tile in 0..l {
            let (ty, tx) = (tile / per_row, tile % per_row);
            for dy in 0..patch {
                let y = ty * patch + dy;
                let start = video.index(t, y, tx * patch, 0);
                data.extend_from_slice(&video.pixels[start..start + patch * 3]);
            }
        }
        frames.push(Matrix::new(l, width, data)?);
    }
    Ok(frames)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &[Matrix],
    height: usize,
    width: usize,
    patch: usize,
) -> Result<RawVideo> {
    let l = patch_count(height, width, patch)?;
    let per_row = width / patch;
    let mut video = RawVideo::zeros(patches.len(), height, width);
    for (t, m) in patches.iter().enumerate() {
        if m.shape() != (l, 3 * patch * patch) {
            return Err(TestaError::shape(
                "unpatchify",
                format!("frame {t} has shape {:?}", m.shape()),
            ));
        }
        for tile in 0..l {
            let (ty, tx) = (tile / per_row, tile % per_row);
            let row = m.row(tile);
            for dy in 0..patch {
                let start = video.index(t, ty * patch + dy, tx * patch, 0);
                video.pixels[start..start + patch * 3]
                    .copy_from_slice(&row[dy * patch * 3..(dy + 1) * patch * 3]);
            }
        }
    }
    Ok(video)
}

/// The evolving `(frames × patches × dim)` feature tensor plus the size
/// bookkeeping that aggregation relies on.
///
/// `token_size[t][ℓ] × frame_size[t]` is the number of original
/// `(frame, patch)` cells the token at `(t, ℓ)` stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub num_frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    pub token_size: Vec<f64>,
    pub frame_size: Vec<f64>,
    pub cls: Vec<f32>,
}

impl TokenGrid {
    /// Fresh grid with unit sizes.
    pub fn from_features(
        num_frames: usize,
        patches: usize,
        dim: usize,
        features: Vec<f32>,
        cls: Vec<f32>,
    ) -> Result<Self> {
        if features.len() != num_frames * patches * dim || cls.len() != dim {
            return Err(TestaError::shape(
                "TokenGrid",
                format!(
                    "{num_frames}x{patches}x{dim} grid got {} features and cls of {}",
                    features.len(),
                    cls.len()
                ),
            ));
        }
        Ok(Self {
            num_frames,
            patches,
            dim,
            features,
            token_size: vec![1.0; num_frames * patches],
            frame_size: vec![1.0; num_frames],
            cls,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.num_frames * self.patches
    }

    #[inline]
    pub fn token(&self, t: usize, l: usize) -> &[f32] {
        let start = (t * self.patches + l) * self.dim;
        &self.features[start..start + self.dim]
    }

    #[inline]
    pub fn token_mut(&mut self, t: usize, l: usize) -> &mut [f32] {
        let start = (t * self.patches + l) * self.dim;
        &mut self.features[start..start + self.dim]
    }

    #[inline]
    pub fn size(&self, t: usize, l: usize) -> f64 {
        self.token_size[t * self.patches + l]
    }

    /// Original cells represented by the token at `(t, l)`.
    pub fn constituents(&self, t: usize, l: usize) -> f64 {
        self.size(t, l) * self.frame_size[t]
    }

    /// Σ over all tokens of `token_size × frame_size`.
    pub fn total_constituents(&self) -> f64 {
        (0..self.num_frames)
            .map(|t| {
                (0..self.patches)
                    .map(|l| self.constituents(t, l))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Copy of one frame's patch features as an `L × D` matrix.
    pub fn frame_matrix(&self, t: usize) -> Matrix {
        let n = self.patches * self.dim;
        Matrix::new(
            self.patches,
            self.dim,
            self.features[t * n..(t + 1) * n].to_vec(),
        )
        .expect("frame slice has grid shape")
    }

    pub fn set_frame(&mut self, t: usize, m: &Matrix) {
        let n = self.patches * self.dim;
        self.features[t * n..(t + 1) * n].copy_from_slice(m.data());
    }

    /// Every token as one row, frame-major.
    pub fn as_matrix(&self) -> Matrix {
        Matrix::new(self.num_tokens(), self.dim, self.features.clone()).expect("grid shape")
    }
}

/// Patch projection, spatial and temporal position tables, and the
/// `[CLS]` seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingWeights {
    pub projection: Matrix,
    pub spatial_pos: Matrix,
    pub temporal_pos: Matrix,
    pub cls: Vec<f32>,
}

impl EmbeddingWeights {
    /// Uniform init with standard deviation ~0.02, the usual ViT scale.
    pub fn init<R: Rng>(
        patch: usize,
        patches: usize,
        max_frames: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            projection: random_matrix(3 * patch * patch, dim, rng),
            spatial_pos: random_matrix(patches, dim, rng),
            temporal_pos: random_matrix(max_frames, dim, rng),
            cls: random_matrix(1, dim, rng).into_data(),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn zero_positional(&mut self) {
        self.spatial_pos.data_mut().fill(0.0);
        self.temporal_pos.data_mut().fill(0.0);
    }
}

pub(crate) const INIT_STD: f32 = 0.02;

pub(crate) fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let a = INIT_STD * 3f32.sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Matrix::new(rows, cols, data).expect("sized")
}

/// `features[t][ℓ] = patch·projection + spatial_pos[ℓ] + temporal_pos[t]`.
pub fn embed(patches: &[Matrix], weights: &EmbeddingWeights) -> Result<TokenGrid> {
    let t = patches.len();
    if t == 0 {
        return Err(TestaError::Empty("embed"));
    }
    let (l, width) = patches[0].shape();
    let dim = weights.dim();
    if weights.projection.rows() != width {
        return Err(TestaError::shape(
            "embed",
            format!(
                "patch width {width} but projection expects {}",
                weights.projection.rows()
            ),
        ));
    }
    if weights.spatial_pos.shape() != (l, dim) {
        return Err(TestaError::shape(
            "embed",
            format!(
                "{l} patches but spatial table is {:?}",
                weights.spatial_pos.shape()
            ),
        ));
    }
    if t > weights.temporal_pos.rows() {
        return Err(TestaError::shape(
            "embed",
            format!(
                "{t} frames exceed temporal table of {}",
                weights.temporal_pos.rows()
            ),
        ));
    }
    if weights.temporal_pos.cols() != dim || weights.cls.len() != dim {
        return Err(TestaError::shape(
            "embed",
            "embedding tables disagree on dim",
        ));
    }

    let mut features = Vec::with_capacity(t * l * dim);
    for (ti, frame) in patches.iter().enumerate() {
        if frame.shape() != (l, width) {
            return Err(TestaError::shape(
                "embed",
                format!("frame {ti} has shape {:?}", frame.shape()),
            ));
        }
        let mut proj = matmul(frame, &weights.projection)?;
        let temporal = weights.temporal_pos.row(ti);
        for li in 0..l {
            let pos = weights.spatial_pos.row(li);
            for ((v, &p), &q) in proj.row_mut(li).iter_mut().zip(pos).zip(temporal) {
                *v += p + q;
            }
        }
        features.extend_from_slice(proj.data());
    }
    TokenGrid::from_features(t, l, dim, features, weights.cls.clone())
}

/// Frame pseudo-tokens: the `token_size`-weighted mean of each frame's
/// patch features.
pub fn frame_tokens(grid: &TokenGrid) -> Matrix {
    frame_weighted_mean(grid, |t| grid.frame_matrix(t))
}

pub(crate) fn frame_weighted_mean(grid: &TokenGrid, rows_of: impl Fn(usize) -> Matrix) -> Matrix {
    let mut out = Matrix::zeros(grid.num_frames, grid.dim);
    for t in 0..grid.num_frames {
        let m = rows_of(t);
        let mut acc = vec![0.0f64; m.cols()];
        let mut total = 0.0f64;
        for l in 0..grid.patches {
            let w = grid.size(t, l);
            total += w;
            for (a, &x) in acc.iter_mut().zip(m.row(l)) {
                *a += w * x as f64;
            }
        }
        for (o, a) in out.row_mut(t).iter_mut().zip(acc) {
            *o = (a / total) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_video(seed: u64, t: usize, h: usize, w: usize) -> RawVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..t * h * w * 3)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        RawVideo::new(t, h, w, px).unwrap()
    }

    #[test]
    fn patch_count_for_224() {
        assert_eq!(patch_count(224, 224, 16).unwrap(), 196);
    }

    #[test]
    fn indivisible_frame_is_rejected() {
        let v = RawVideo::zeros(1, 10, 12);
        assert!(matches!(patchify(&v, 4), Err(TestaError::Shape { .. })));
    }

    #[test]
    fn whole_frame_patch() {
        let v = random_video(1, 2, 4, 4);
        let p = patchify(&v, 4).unwrap();
        assert_eq!(p[1].shape(), (1, 48));
        assert_eq!(p[1].row(0), v.frame(1));
    }

    #[test]
    fn patchify_conserves_pixel_mass_and_inverts() {
        let v = random_video(2, 3, 8, 12);
        let p = patchify(&v, 4).unwrap();
        let a: f64 = v.pixels.iter().map(|&x| x as f64).sum();
        let b: f64 = p.iter().flat_map(|m| m.data()).map(|&x| x as f64).sum();
        assert!((a - b).abs() < 1e-6);
        assert_eq!(unpatchify(&p, 8, 12, 4).unwrap(), v);
    }

    #[test]
    fn raster_order_of_tiles() {
        let mut v = RawVideo::zeros(1, 4, 4);
        // mark pixel (y=2, x=1) red: it sits in tile row 1, col 0 → tile 2
        let i = v.index(0, 2, 1, 0);
        v.pixels[i] = 1.0;
        let p = patchify(&v, 2).unwrap();
        assert_eq!(p[0].row(2)[3], 1.0);
        assert_eq!(p[0].data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn zero_video_zero_tables_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = EmbeddingWeights::init(4, 4, 2, 8, &mut rng);
        w.zero_positional();
        let v = RawVideo::zeros(2, 8, 8);
        let g = embed(&patchify(&v, 4).unwrap(), &w).unwrap();
        assert!(g.features.iter().all(|&x| x == 0.0));
        assert_eq!(g.token_size, vec![1.0; 8]);
        assert_eq!(g.frame_size, vec![1.0; 2]);
        assert_eq!(g.cls, w.cls);
    }

    #[test]
    fn identical_frames_differ_only_by_temporal_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = EmbeddingWeights::init(4, 4, 2, 8, &mut rng);
        let one = random_video(6, 1, 8, 8);
        let mut px = one.pixels.clone();
        px.extend_from_slice(&one.pixels);
        let v = RawVideo::new(2, 8, 8, px).unwrap();
        let p = patchify(&v, 4).unwrap();
        let with = embed(&p, &w).unwrap();
        assert_ne!(with.frame_matrix(0), with.frame_matrix(1));
        w.temporal_pos.data_mut().fill(0.0);
        let without = embed(&p, &w).unwrap();
        assert_eq!(without.frame_matrix(0), without.frame_matrix(1));
    }

    #[test]
    fn embed_shape_for_224() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = EmbeddingWeights::init(16, 196, 2, 8, &mut rng);
        let g = embed(&patchify(&RawVideo::zeros(2, 224, 224), 16).unwrap(), &w).unwrap();
        assert_eq!((g.num_frames, g.patches, g.dim), (2, 196, 8));
    }

    #[test]
    fn too_many_frames_for_temporal_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = EmbeddingWeights::init(4, 1, 2, 8, &mut rng);
        let p = patchify(&RawVideo::zeros(3, 4, 4), 4).unwrap();
        assert!(embed(&p, &w).is_err());
    }

    #[test]
    fn frame_token_examples() {
        let g = TokenGrid::from_features(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 2]).unwrap();
        assert_eq!(frame_tokens(&g).data(), &[1.0, 2.0, 3.0, 4.0]);
        let g = TokenGrid::from_features(1, 3, 2, [0.5f32, -1.0].repeat(3), vec![0.0; 2]).unwrap();
        assert_eq!(frame_tokens(&g).row(0), &[0.5, -1.0]);
    }

    #[test]
    fn frame_tokens_uniform_sizes_match_plain_mean() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, l, d) = (rng.random_range(1..5), rng.random_range(1..9), 4);
            let f: Vec<f32> = (0..t * l * d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mut g = TokenGrid::from_features(t, l, d, f, vec![0.0; d]).unwrap();
            let s = rng.random_range(1.0..4.0);
            g.token_size.fill(s);
            let ft = frame_tokens(&g);
            for ti in 0..t {
                for c in 0..d {
                    let mean = (0..l).map(|li| g.token(ti, li)[c] as f64).sum::<f64>() / l as f64;
                    assert!((ft.get(ti, c) as f64 - mean).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn frame_tokens_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f: Vec<f32> = (0..5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = TokenGrid::from_features(1, 5, 3, f.clone(), vec![0.0; 3]).unwrap();
        let mut rev: Vec<f32> = Vec::new();
        for l in (0..5).rev() {
            rev.extend_from_slice(&f[l * 3..l * 3 + 3]);
        }
        let h = TokenGrid::from_features(1, 5, 3, rev, vec![0.0; 3]).unwrap();
        let (a, b) = (frame_tokens(&g), frame_tokens(&h));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
