//! Divided space-time attention.
//!
//! Temporal attention runs, for every patch position, over that position's
//! sequence of frames. Spatial attention runs, for every frame, over the
//! `[CLS]` token followed by the frame's patches. Both are pre-norm
//! multi-head attention with a residual connection. Each call also returns
//! the keys and head-averaged attention that token aggregation consumes.

use rand::Rng;

use crate::error::{Result, TestaError};
use crate::tensors::{add_row_bias, gelu, layer_norm, matmul, softmax_in_place, Matrix};
use crate::tokenization::{frame_weighted_mean, random_matrix, TokenGrid};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub norm_gamma: Vec<f32>,
    pub norm_beta: Vec<f32>,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
}

impl AttentionWeights {
    fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            norm_gamma: vec![1.0; dim],
            norm_beta: vec![0.0; dim],
            query: random_matrix(dim, dim, rng),
            key: random_matrix(dim, dim, rng),
            value: random_matrix(dim, dim, rng),
            output: random_matrix(dim, dim, rng),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            norm_gamma: vec![0.0; dim],
            norm_beta: vec![0.0; dim],
            query: Matrix::zeros(dim, dim),
            key: Matrix::zeros(dim, dim),
            value: Matrix::zeros(dim, dim),
            output: Matrix::zeros(dim, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardWeights {
    pub norm_gamma: Vec<f32>,
    pub norm_beta: Vec<f32>,
    pub up: Matrix,
    pub up_bias: Vec<f32>,
    pub down: Matrix,
    pub down_bias: Vec<f32>,
}

pub const FFN_EXPANSION: usize = 4;

impl FeedForwardWeights {
    fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let hidden = dim * FFN_EXPANSION;
        Self {
            norm_gamma: vec![1.0; dim],
            norm_beta: vec![0.0; dim],
            up: random_matrix(dim, hidden, rng),
            up_bias: vec![0.0; hidden],
            down: random_matrix(hidden, dim, rng),
            down_bias: vec![0.0; dim],
        }
    }

    fn zeros(dim: usize) -> Self {
        let hidden = dim * FFN_EXPANSION;
        Self {
            norm_gamma: vec![0.0; dim],
            norm_beta: vec![0.0; dim],
            up: Matrix::zeros(dim, hidden),
            up_bias: vec![0.0; hidden],
            down: Matrix::zeros(hidden, dim),
            down_bias: vec![0.0; dim],
        }
    }
}

/// Parameters of one divided space-time block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub heads: usize,
    pub temporal: AttentionWeights,
    pub spatial: AttentionWeights,
    pub ffn: FeedForwardWeights,
}

impl BlockWeights {
    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            heads,
            temporal: AttentionWeights::init(dim, rng),
            spatial: AttentionWeights::init(dim, rng),
            ffn: FeedForwardWeights::init(dim, rng),
        })
    }

    /// All-zero block: every sublayer reduces to its residual path.
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            heads,
            temporal: AttentionWeights::zeros(dim),
            spatial: AttentionWeights::zeros(dim),
            ffn: FeedForwardWeights::zeros(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.temporal.query.rows()
    }

    /// Zero the output projections of every sublayer, leaving queries and
    /// keys intact. The block then leaves features untouched but still
    /// produces meaningful keys and attention for aggregation.
    pub fn silence_outputs(&mut self) {
        self.temporal.output.data_mut().fill(0.0);
        self.spatial.output.data_mut().fill(0.0);
        self.ffn.down.data_mut().fill(0.0);
        self.ffn.down_bias.fill(0.0);
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(TestaError::shape(
            "BlockWeights",
            format!("{heads} heads do not divide dim {dim}"),
        ));
    }
    Ok(())
}

/// Keys and head-averaged attention for one attended sequence.
///
/// When `leading_cls` is set, row/column 0 of `attn` belongs to the `[CLS]`
/// token and `keys` covers only the patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnStats {
    pub keys: Matrix,
    pub attn: Matrix,
    pub leading_cls: bool,
}

impl AttnStats {
    /// Attention received by each token from every other token, `[CLS]`
    /// included as a sender but excluded from the result.
    pub fn importance(&self) -> Vec<f64> {
        let scores = crate::aggregation::importance_scores(&self.attn)
            .expect("attention matrices are square");
        if self.leading_cls {
            scores[1..].to_vec()
        } else {
            scores
        }
    }
}

/// Result of the spatial sublayer: frame-averaged statistics for a shared
/// merge plan, plus each frame's own statistics.
#[derive(Debug, Clone)]
pub struct SpatialStats {
    pub mean: AttnStats,
    pub per_frame: Vec<AttnStats>,
}

struct Projected {
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

fn project(x: &Matrix, w: &AttentionWeights) -> Result<Projected> {
    let h = layer_norm(x, &w.norm_gamma, &w.norm_beta, LN_EPS);
    Ok(Projected {
        q: matmul(&h, &w.query)?,
        k: matmul(&h, &w.key)?,
        v: matmul(&h, &w.value)?,
    })
}

/// Multi-head attention over one sequence given its rows of Q, K and V.
/// Returns the concatenated per-head context (n × D) and the head-averaged
/// attention (n × n).
fn attend_sequence(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> (Matrix, Matrix) {
    let n = q.rows();
    let dim = q.cols();
    let dh = dim / heads;
    let inv_scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(n, dim);
    let mut avg = vec![0.0f64; n * n];
    let mut row = vec![0.0f32; n];
    for h in 0..heads {
        let span = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[span.clone()];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[span.clone()];
                *s = qi
                    .iter()
                    .zip(kj)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>() as f32;
            }
            softmax_in_place(&mut row, inv_scale);
            let mut acc = vec![0.0f64; dh];
            for (j, &a) in row.iter().enumerate() {
                avg[i * n + j] += a as f64;
                let vj = &v.row(j)[span.clone()];
                for (c, &x) in acc.iter_mut().zip(vj) {
                    *c += a as f64 * x as f64;
                }
            }
            for (o, c) in ctx.row_mut(i)[span.clone()].iter_mut().zip(acc) {
                *o = c as f32;
            }
        }
    }
    let attn = avg.into_iter().map(|a| (a / heads as f64) as f32).collect();
    (ctx, Matrix::new(n, n, attn).expect("n×n"))
}

fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Temporal self-attention across frames at every patch position.
///
/// The returned stats are frame-level: keys are the `token_size`-weighted
/// mean over positions of each frame's keys, and attention is the mean over
/// positions and heads of the per-position `T_i × T_i` matrices.
pub fn temporal_attention(grid: &TokenGrid, w: &BlockWeights) -> Result<(TokenGrid, AttnStats)> {
    check_grid(grid, w)?;
    let (t, l, d) = (grid.num_frames, grid.patches, grid.dim);
    let x = grid.as_matrix();
    let p = project(&x, &w.temporal)?;

    let per_position = map_indexed(l, |li| {
        let idx: Vec<usize> = (0..t).map(|ti| ti * l + li).collect();
        attend_sequence(
            &p.q.select_rows(&idx),
            &p.k.select_rows(&idx),
            &p.v.select_rows(&idx),
            w.heads,
        )
    });

    let mut ctx = Matrix::zeros(t * l, d);
    let mut attn = vec![0.0f64; t * t];
    for (li, (c, a)) in per_position.iter().enumerate() {
        for ti in 0..t {
            ctx.row_mut(ti * l + li).copy_from_slice(c.row(ti));
        }
        for (s, &v) in attn.iter_mut().zip(a.data()) {
            *s += v as f64;
        }
    }
    let attn = Matrix::new(
        t,
        t,
        attn.into_iter().map(|s| (s / l as f64) as f32).collect(),
    )?;

    let out = matmul(&ctx, &w.temporal.output)?;
    let mut next = grid.clone();
    for (f, &o) in next.features.iter_mut().zip(out.data()) {
        *f += o;
    }

    let keys = frame_weighted_mean(grid, |ti| {
        Matrix::new(l, d, p.k.data()[ti * l * d..(ti + 1) * l * d].to_vec()).expect("frame keys")
    });
    Ok((
        next,
        AttnStats {
            keys,
            attn,
            leading_cls: false,
        },
    ))
}

/// Spatial self-attention within every frame, with the shared `[CLS]` token
/// prepended to each frame's sequence. The new `[CLS]` is the mean of its
/// per-frame outputs.
pub fn spatial_attention(grid: &TokenGrid, w: &BlockWeights) -> Result<(TokenGrid, SpatialStats)> {
    check_grid(grid, w)?;
    let (t, l, d) = (grid.num_frames, grid.patches, grid.dim);
    let x = grid.as_matrix();
    let p = project(&x, &w.spatial)?;
    let cls_in = Matrix::new(1, d, grid.cls.clone())?;
    let c = project(&cls_in, &w.spatial)?;

    let per_frame = map_indexed(t, |ti| {
        let gather = |m: &Matrix, cls_row: &Matrix| {
            let mut data = Vec::with_capacity((l + 1) * d);
            data.extend_from_slice(cls_row.row(0));
            data.extend_from_slice(&m.data()[ti * l * d..(ti + 1) * l * d]);
            Matrix::new(l + 1, d, data).expect("sequence")
        };
        attend_sequence(
            &gather(&p.q, &c.q),
            &gather(&p.k, &c.k),
            &gather(&p.v, &c.v),
            w.heads,
        )
    });

    let mut ctx = Matrix::zeros(t * l, d);
    let mut cls_ctx = Matrix::zeros(t, d);
    for (ti, (cx, _)) in per_frame.iter().enumerate() {
        cls_ctx.row_mut(ti).copy_from_slice(cx.row(0));
        for li in 0..l {
            ctx.row_mut(ti * l + li).copy_from_slice(cx.row(li + 1));
        }
    }
    let out = matmul(&ctx, &w.spatial.output)?;
    let cls_out = matmul(&cls_ctx, &w.spatial.output)?;

    let mut next = grid.clone();
    for (f, &o) in next.features.iter_mut().zip(out.data()) {
        *f += o;
    }
    for (ci, c) in next.cls.iter_mut().enumerate() {
        let mean = (0..t).map(|ti| cls_out.get(ti, ci) as f64).sum::<f64>() / t as f64;
        *c += mean as f32;
    }

    let per_frame_stats: Vec<AttnStats> = per_frame
        .into_iter()
        .enumerate()
        .map(|(ti, (_, attn))| AttnStats {
            keys: Matrix::new(l, d, p.k.data()[ti * l * d..(ti + 1) * l * d].to_vec())
                .expect("frame keys"),
            attn,
            leading_cls: true,
        })
        .collect();
    let mean = AttnStats {
        keys: mean_of(per_frame_stats.iter().map(|s| &s.keys)),
        attn: mean_of(per_frame_stats.iter().map(|s| &s.attn)),
        leading_cls: true,
    };
    Ok((
        next,
        SpatialStats {
            mean,
            per_frame: per_frame_stats,
        },
    ))
}

fn mean_of<'a>(mats: impl Iterator<Item = &'a Matrix>) -> Matrix {
    let mut count = 0usize;
    let mut shape = (0, 0);
    let mut acc: Vec<f64> = Vec::new();
    for m in mats {
        if count == 0 {
            shape = m.shape();
            acc = vec![0.0; m.data().len()];
        }
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
        count += 1;
    }
    let data = acc.into_iter().map(|a| (a / count as f64) as f32).collect();
    Matrix::new(shape.0, shape.1, data).expect("mean shape")
}

/// Per-token pre-norm MLP (`D → 4D → D`, GELU) with residual, applied to the
/// patch tokens and to `[CLS]`.
pub fn feed_forward(grid: &TokenGrid, w: &BlockWeights) -> Result<TokenGrid> {
    check_grid(grid, w)?;
    let mut next = grid.clone();
    let mut x = grid.as_matrix();
    let mut all = x.data().to_vec();
    all.extend_from_slice(&grid.cls);
    x = Matrix::new(grid.num_tokens() + 1, grid.dim, all)?;

    let f = &w.ffn;
    let h = layer_norm(&x, &f.norm_gamma, &f.norm_beta, LN_EPS);
    let mut hidden = matmul(&h, &f.up)?;
    add_row_bias(&mut hidden, &f.up_bias);
    hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut out = matmul(&hidden, &f.down)?;
    add_row_bias(&mut out, &f.down_bias);

    let n = grid.num_tokens() * grid.dim;
    for (v, &o) in next.features.iter_mut().zip(&out.data()[..n]) {
        *v += o;
    }
    for (v, &o) in next.cls.iter_mut().zip(&out.data()[n..]) {
        *v += o;
    }
    Ok(next)
}

fn check_grid(grid: &TokenGrid, w: &BlockWeights) -> Result<()> {
    if grid.dim != w.dim() {
        return Err(TestaError::shape(
            "attention",
            format!("grid dim {} but block dim {}", grid.dim, w.dim()),
        ));
    }
    if grid.num_frames == 0 || grid.patches == 0 {
        return Err(TestaError::Empty("attention"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, t: usize, l: usize, d: usize) -> TokenGrid {
        let f = (0..t * l * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let cls = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        TokenGrid::from_features(t, l, d, f, cls).unwrap()
    }

    /// Larger-than-default weights so attention is far from uniform.
    fn sharp_block(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> BlockWeights {
        let mut w = BlockWeights::init(d, heads, rng).unwrap();
        for m in [
            &mut w.temporal.query,
            &mut w.temporal.key,
            &mut w.spatial.query,
            &mut w.spatial.key,
        ] {
            m.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
        w
    }

    fn assert_stochastic(m: &Matrix) {
        for r in m.iter_rows() {
            let s: f64 = r.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-5, "row sums to {s}");
        }
    }

    #[test]
    fn single_frame_temporal_is_value_output_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 1, 3, 8);
        let w = BlockWeights::init(8, 2, &mut rng).unwrap();
        let (out, stats) = temporal_attention(&g, &w).unwrap();
        assert_eq!(stats.attn.data(), &[1.0]);
        let h = layer_norm(
            &g.as_matrix(),
            &w.temporal.norm_gamma,
            &w.temporal.norm_beta,
            LN_EPS,
        );
        let delta = matmul(&matmul(&h, &w.temporal.value).unwrap(), &w.temporal.output).unwrap();
        for (i, (&o, &x)) in out.features.iter().zip(&g.features).enumerate() {
            assert!((o - x - delta.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, l) = (rng.random_range(1..6), rng.random_range(1..7));
            let g = random_grid(&mut rng, t, l, 8);
            let w = sharp_block(&mut rng, 8, 2);
            let (_, ts) = temporal_attention(&g, &w).unwrap();
            assert_eq!(ts.attn.shape(), (t, t));
            assert_stochastic(&ts.attn);
            let (_, ss) = spatial_attention(&g, &w).unwrap();
            assert_eq!(ss.mean.attn.shape(), (l + 1, l + 1));
            assert_stochastic(&ss.mean.attn);
            ss.per_frame.iter().for_each(|s| assert_stochastic(&s.attn));
        }
    }

    #[test]
    fn equal_frames_give_uniform_frame_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = random_grid(&mut rng, 1, 4, 8);
        let mut f = one.features.clone();
        f.extend_from_slice(&one.features);
        f.extend_from_slice(&one.features);
        let g = TokenGrid::from_features(3, 4, 8, f, one.cls.clone()).unwrap();
        let w = sharp_block(&mut rng, 8, 4);
        let (_, s) = temporal_attention(&g, &w).unwrap();
        for &a in s.attn.data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_are_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(&mut rng, 2, 1, 8);
        let w = BlockWeights::zeros(8, 2).unwrap();
        let (s, _) = spatial_attention(&g, &w).unwrap();
        assert_eq!(s, g);
        let (t, _) = temporal_attention(&g, &w).unwrap();
        assert_eq!(t, g);
        assert_eq!(feed_forward(&g, &w).unwrap(), g);
    }

    #[test]
    fn cls_stays_finite_with_right_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_grid(&mut rng, 3, 5, 16);
        let w = sharp_block(&mut rng, 16, 4);
        let (s, _) = spatial_attention(&g, &w).unwrap();
        assert_eq!(s.cls.len(), 16);
        assert!(s.cls.iter().all(|v| v.is_finite()));
        assert_ne!(s.cls, g.cls);
    }

    #[test]
    fn feed_forward_is_tokenwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = random_grid(&mut rng, 2, 3, 8);
        let copy = g.token(0, 1).to_vec();
        g.token_mut(1, 2).copy_from_slice(&copy);
        let w = BlockWeights::init(8, 2, &mut rng).unwrap();
        let out = feed_forward(&g, &w).unwrap();
        assert_eq!(out.features.len(), g.features.len());
        assert_eq!(out.token(0, 1), out.token(1, 2));
        assert_ne!(out.token(0, 1), g.token(0, 1));
    }

    #[test]
    fn spatial_equivariant_to_frame_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_grid(&mut rng, 3, 4, 8);
        let w = sharp_block(&mut rng, 8, 2);
        let perm = [2usize, 0, 1];
        let mut pg = g.clone();
        for (new, &old) in perm.iter().enumerate() {
            pg.set_frame(new, &g.frame_matrix(old));
        }
        let (a, _) = spatial_attention(&g, &w).unwrap();
        let (b, _) = spatial_attention(&pg, &w).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(b.frame_matrix(new), a.frame_matrix(old));
        }
        for (x, y) in a.cls.iter().zip(&b.cls) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn temporal_equivariant_to_position_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_grid(&mut rng, 3, 4, 8);
        let w = sharp_block(&mut rng, 8, 2);
        let perm = [3usize, 1, 0, 2];
        let mut pg = g.clone();
        for t in 0..3 {
            for (new, &old) in perm.iter().enumerate() {
                let src = g.token(t, old).to_vec();
                pg.token_mut(t, new).copy_from_slice(&src);
            }
        }
        let (a, sa) = temporal_attention(&g, &w).unwrap();
        let (b, sb) = temporal_attention(&pg, &w).unwrap();
        for t in 0..3 {
            for (new, &old) in perm.iter().enumerate() {
                assert_eq!(b.token(t, new), a.token(t, old));
            }
        }
        for (x, y) in sa.attn.data().iter().zip(sb.attn.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(BlockWeights::init(10, 3, &mut rng).is_err());
    }
}
