//! Token aggregation by bipartite soft matching.
//!
//! Tokens are split into a reducible set A and a kept set B. Every A token
//! is matched to its most similar B token (cosine similarity of attention
//! keys) and a chosen subset of those pairs is merged. The same machinery
//! serves both frame tokens (temporal aggregation) and patch tokens
//! (spatial aggregation).
//!
//! Tie-breaking is always "lower index wins".

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TestaError};
use crate::tensors::{cosine_sim_matrix, Matrix};
use crate::tokenization::TokenGrid;

/// How set A is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// A = the `R` tokens receiving the least attention.
    Importance,
    /// A = even positions, B = odd positions; the `R` best-matched pairs merge.
    Geometry,
}

impl Strategy {
    /// Largest reduction the strategy supports for `n` tokens.
    pub fn max_reduction(self, n: usize) -> usize {
        match self {
            Strategy::Importance => n.saturating_sub(1),
            Strategy::Geometry => n / 2,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Importance => "importance",
            Strategy::Geometry => "geometry",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "importance" => Ok(Strategy::Importance),
            "geometry" => Ok(Strategy::Geometry),
            other => Err(format!("unknown strategy '{other}' (importance|geometry)")),
        }
    }
}

/// How merged features are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeWeighting {
    /// Weight by the number of original cells each token represents, so a
    /// merged token is the exact mean of all its constituents.
    Sized,
    /// Plain unweighted mean of the destination and its sources.
    Pairwise,
}

impl fmt::Display for MergeWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeWeighting::Sized => "sized",
            MergeWeighting::Pairwise => "pairwise",
        })
    }
}

impl FromStr for MergeWeighting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sized" => Ok(MergeWeighting::Sized),
            "pairwise" => Ok(MergeWeighting::Pairwise),
            other => Err(format!("unknown weighting '{other}' (sized|pairwise)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Temporal,
    Spatial,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Temporal => "temporal",
            Dimension::Spatial => "spatial",
        })
    }
}

/// One A token together with its best B match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub src: usize,
    pub dst: usize,
    pub similarity: f32,
    pub merged: bool,
}

/// Merges produced by one aggregation step over `n` tokens.
///
/// `pairs` holds `(src, dst)` token indices sorted by `src`; `kept_order[i]`
/// is the old index of the token that ends up at new index `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
    pub kept_order: Vec<usize>,
    pub candidates: Vec<Candidate>,
}

impl MergePlan {
    /// Build a plan from its candidates; merged candidates become pairs.
    pub fn from_candidates(n: usize, candidates: Vec<Candidate>) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = candidates
            .iter()
            .filter(|c| c.merged)
            .map(|c| (c.src, c.dst))
            .collect();
        pairs.sort_unstable();
        let plan = Self {
            n,
            kept_order: kept_after(n, pairs.iter().map(|p| p.0)),
            pairs,
            candidates,
        };
        plan.validate(n)?;
        Ok(plan)
    }

    pub fn reduction(&self) -> usize {
        self.pairs.len()
    }

    pub fn output_len(&self) -> usize {
        self.n - self.pairs.len()
    }

    /// Check the plan against a sequence of `n` tokens.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n != n {
            return Err(TestaError::StalePlan(format!(
                "plan built for {} tokens, applied to {n}",
                self.n
            )));
        }
        let mut is_src = vec![false; n];
        for &(s, d) in &self.pairs {
            if s >= n || d >= n {
                return Err(TestaError::StalePlan(format!(
                    "pair ({s}→{d}) out of range for {n} tokens"
                )));
            }
            if is_src[s] {
                return Err(TestaError::StalePlan(format!("token {s} merged twice")));
            }
            is_src[s] = true;
        }
        if let Some(&(s, d)) = self.pairs.iter().find(|&&(_, d)| is_src[d]) {
            return Err(TestaError::StalePlan(format!(
                "pair ({s}→{d}) targets a merged token"
            )));
        }
        if self.kept_order != kept_after(n, self.pairs.iter().map(|p| p.0)) {
            return Err(TestaError::StalePlan(
                "kept_order disagrees with pairs".into(),
            ));
        }
        Ok(())
    }

    /// Groups of old indices that become each new token, in output order:
    /// `[dst, srcs…]` with srcs ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut slot = vec![usize::MAX; self.n];
        for (new, &old) in self.kept_order.iter().enumerate() {
            slot[old] = new;
        }
        let mut groups: Vec<Vec<usize>> = self.kept_order.iter().map(|&k| vec![k]).collect();
        for &(s, d) in &self.pairs {
            groups[slot[d]].push(s);
        }
        groups
    }
}

fn kept_after(n: usize, removed: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut gone = vec![false; n];
    for r in removed {
        if r < n {
            gone[r] = true;
        }
    }
    (0..n).filter(|&i| !gone[i]).collect()
}

/// Tokens dropped by pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub n: usize,
    pub removed: Vec<usize>,
    pub kept_order: Vec<usize>,
}

impl PrunePlan {
    pub fn validate(&self) -> Result<()> {
        if self.removed.iter().any(|&r| r >= self.n)
            || self.kept_order != kept_after(self.n, self.removed.iter().copied())
            || self.removed.len() + self.kept_order.len() != self.n
        {
            return Err(TestaError::StalePlan("inconsistent prune plan".into()));
        }
        Ok(())
    }
}

/// A reduction step recorded in a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Reduction {
    Merge(MergePlan),
    Prune(PrunePlan),
}

impl Reduction {
    pub fn n(&self) -> usize {
        match self {
            Reduction::Merge(p) => p.n,
            Reduction::Prune(p) => p.n,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Reduction::Merge(p) => p.output_len(),
            Reduction::Prune(p) => p.kept_order.len(),
        }
    }
}

/// Attention each token receives from all other tokens: the column sums of
/// `attn` with the diagonal excluded.
pub fn importance_scores(attn: &Matrix) -> Result<Vec<f64>> {
    let (n, m) = attn.shape();
    if n != m {
        return Err(TestaError::shape(
            "importance_scores",
            format!("{n}x{m} is not square"),
        ));
    }
    let mut scores = vec![0.0f64; n];
    for j in 0..n {
        for (i, s) in scores.iter_mut().enumerate() {
            if i != j {
                *s += attn.get(j, i) as f64;
            }
        }
    }
    Ok(scores)
}

fn check_range(r: usize, n: usize, max: usize) -> Result<()> {
    if r < 1 || r > max {
        return Err(TestaError::ReductionRange { r, n, min: 1, max });
    }
    Ok(())
}

/// Best B match (by row of `sim`) for every A token; ties → lower B index.
fn best_matches(sim: &Matrix) -> Vec<(usize, f32)> {
    sim.iter_rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &s)| {
                    if s > best.1 {
                        (j, s)
                    } else {
                        best
                    }
                })
        })
        .collect()
}

fn match_sets(keys: &Matrix, a: &[usize], b: &[usize]) -> Result<Vec<Candidate>> {
    let sim = cosine_sim_matrix(&keys.select_rows(a), &keys.select_rows(b))?;
    Ok(best_matches(&sim)
        .into_iter()
        .zip(a)
        .map(|((bj, s), &ai)| Candidate {
            src: ai,
            dst: b[bj],
            similarity: s,
            merged: false,
        })
        .collect())
}

/// Importance-based plan: the `r` least-attended tokens form A (ties →
/// lower index) and each merges into its most similar remaining token.
pub fn plan_importance(keys: &Matrix, scores: &[f64], r: usize) -> Result<MergePlan> {
    let n = keys.rows();
    if scores.len() != n {
        return Err(TestaError::shape(
            "plan_importance",
            format!("{n} keys, {} scores", scores.len()),
        ));
    }
    check_range(r, n, Strategy::Importance.max_reduction(n))?;
    let mut a = lowest(scores, r);
    a.sort_unstable();
    let b = kept_after(n, a.iter().copied());
    let mut cands = match_sets(keys, &a, &b)?;
    cands.iter_mut().for_each(|c| c.merged = true);
    MergePlan::from_candidates(n, cands)
}

/// Indices of the `r` smallest scores, ties → lower index first.
fn lowest(scores: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    idx.truncate(r);
    idx
}

/// Geometry-based plan: even positions form A, odd positions form B; the `r`
/// most similar (A → best B) pairs are merged, ties → lower A index.
pub fn plan_geometry(keys: &Matrix, r: usize) -> Result<MergePlan> {
    let n = keys.rows();
    check_range(r, n, Strategy::Geometry.max_reduction(n))?;
    let a: Vec<usize> = (0..n).step_by(2).collect();
    let b: Vec<usize> = (1..n).step_by(2).collect();
    let mut cands = match_sets(keys, &a, &b)?;
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| {
        cands[j]
            .similarity
            .total_cmp(&cands[i].similarity)
            .then(cands[i].src.cmp(&cands[j].src))
    });
    for &i in &order[..r] {
        cands[i].merged = true;
    }
    MergePlan::from_candidates(n, cands)
}

/// Dispatch on strategy. `scores` is only consulted for importance plans.
pub fn plan(strategy: Strategy, keys: &Matrix, scores: &[f64], r: usize) -> Result<MergePlan> {
    match strategy {
        Strategy::Importance => plan_importance(keys, scores, r),
        Strategy::Geometry => plan_geometry(keys, r),
    }
}

/// Largest number of tokens [`oracle_best_pairs`] will enumerate.
pub const ORACLE_LIMIT: usize = 12;

/// Exhaustive reference for the matching step.
///
/// Given an explicit A/B partition (`in_a[i]` is true for A tokens), finds
/// every A token's best B match by checking it against all alternatives, then
/// enumerates every `r`-subset of A and returns the unique one whose pairs
/// dominate all unchosen pairs (higher similarity, or equal similarity and
/// lower A index).
pub fn oracle_best_pairs(keys: &Matrix, in_a: &[bool], r: usize) -> Result<MergePlan> {
    let n = keys.rows();
    if n > ORACLE_LIMIT {
        return Err(TestaError::OracleTooLarge {
            n,
            limit: ORACLE_LIMIT,
        });
    }
    if in_a.len() != n {
        return Err(TestaError::shape(
            "oracle_best_pairs",
            "partition length differs from token count",
        ));
    }
    let a: Vec<usize> = (0..n).filter(|&i| in_a[i]).collect();
    let b: Vec<usize> = (0..n).filter(|&i| !in_a[i]).collect();
    if b.is_empty() || r == 0 || r > a.len() {
        return Err(TestaError::ReductionRange {
            r,
            n,
            min: 1,
            max: a.len().min(n.saturating_sub(1)),
        });
    }

    let cosine = |i: usize, j: usize| -> f32 {
        let (x, y) = (keys.row(i), keys.row(j));
        let mut xy = 0.0f64;
        let mut xx = 0.0f64;
        let mut yy = 0.0f64;
        for k in 0..x.len() {
            xy += x[k] as f64 * y[k] as f64;
            xx += x[k] as f64 * x[k] as f64;
            yy += y[k] as f64 * y[k] as f64;
        }
        let denom = xx.sqrt() * yy.sqrt();
        if denom > 0.0 {
            (xy / denom).clamp(-1.0, 1.0) as f32
        } else {
            0.0
        }
    };

    let best: Vec<(usize, f32)> = a
        .iter()
        .map(|&ai| {
            let winners: Vec<(usize, f32)> = b
                .iter()
                .map(|&bj| (bj, cosine(ai, bj)))
                .filter(|&(bj, s)| {
                    b.iter().all(|&other| {
                        let so = cosine(ai, other);
                        s > so || (s == so && bj <= other)
                    })
                })
                .collect();
            assert_eq!(winners.len(), 1, "exactly one best match");
            winners[0]
        })
        .collect();

    let beats = |i: usize, j: usize| -> bool {
        match best[i].1.partial_cmp(&best[j].1) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Equal) => a[i] < a[j],
            _ => false,
        }
    };
    let mut chosen: Option<u32> = None;
    for mask in 0u32..(1 << a.len()) {
        if mask.count_ones() as usize != r {
            continue;
        }
        let inside = |i: usize| mask & (1 << i) != 0;
        let dominant = (0..a.len())
            .filter(|&i| inside(i))
            .all(|i| (0..a.len()).filter(|&j| !inside(j)).all(|j| beats(i, j)));
        if dominant {
            assert!(chosen.is_none(), "top-r subset must be unique");
            chosen = Some(mask);
        }
    }
    let mask = chosen.expect("a dominant subset always exists");
    let cands = a
        .iter()
        .zip(&best)
        .enumerate()
        .map(|(i, (&src, &(dst, similarity)))| Candidate {
            src,
            dst,
            similarity,
            merged: mask & (1 << i) != 0,
        })
        .collect();
    MergePlan::from_candidates(n, cands)
}

/// Merge patch tokens with one plan shared by every frame.
pub fn apply_spatial(
    grid: &TokenGrid,
    plan: &MergePlan,
    weighting: MergeWeighting,
) -> Result<TokenGrid> {
    apply_spatial_frames(grid, &vec![plan; grid.num_frames], weighting)
}

/// Merge patch tokens with a separate plan per frame. All plans must reduce
/// by the same amount so frames keep a common patch count.
pub fn apply_spatial_per_frame(
    grid: &TokenGrid,
    plans: &[MergePlan],
    weighting: MergeWeighting,
) -> Result<TokenGrid> {
    let refs: Vec<&MergePlan> = plans.iter().collect();
    apply_spatial_frames(grid, &refs, weighting)
}

fn apply_spatial_frames(
    grid: &TokenGrid,
    plans: &[&MergePlan],
    weighting: MergeWeighting,
) -> Result<TokenGrid> {
    if plans.len() != grid.num_frames {
        return Err(TestaError::StalePlan(format!(
            "{} spatial plans for {} frames",
            plans.len(),
            grid.num_frames
        )));
    }
    let out_len = plans.first().map_or(grid.patches, |p| p.output_len());
    for p in plans {
        p.validate(grid.patches)?;
        if p.output_len() != out_len {
            return Err(TestaError::StalePlan(
                "per-frame plans reduce by different amounts".into(),
            ));
        }
    }
    let d = grid.dim;
    let mut features = Vec::with_capacity(grid.num_frames * out_len * d);
    let mut sizes = Vec::with_capacity(grid.num_frames * out_len);
    for (t, p) in plans.iter().enumerate() {
        for group in p.groups() {
            let (f, s) = merge_tokens(
                group.iter().map(|&l| (grid.token(t, l), grid.size(t, l))),
                d,
                weighting,
            );
            features.extend(f);
            sizes.push(s);
        }
    }
    Ok(TokenGrid {
        num_frames: grid.num_frames,
        patches: out_len,
        dim: d,
        features,
        token_size: sizes,
        frame_size: grid.frame_size.clone(),
        cls: grid.cls.clone(),
    })
}

/// Merge whole frames: merging frame a into frame b merges patch ℓ of a with
/// patch ℓ of b at every position.
pub fn apply_temporal(
    grid: &TokenGrid,
    plan: &MergePlan,
    weighting: MergeWeighting,
) -> Result<TokenGrid> {
    plan.validate(grid.num_frames)?;
    let (l, d) = (grid.patches, grid.dim);
    let groups = plan.groups();
    let mut features = Vec::with_capacity(groups.len() * l * d);
    let mut token_size = Vec::with_capacity(groups.len() * l);
    let mut frame_size = Vec::with_capacity(groups.len());
    for group in &groups {
        let fsize: f64 = group.iter().map(|&t| grid.frame_size[t]).sum();
        for li in 0..l {
            let members = group
                .iter()
                .map(|&t| (grid.token(t, li), grid.size(t, li) * grid.frame_size[t]));
            let (f, cells) = merge_tokens(members, d, weighting);
            features.extend(f);
            token_size.push(cells / fsize);
        }
        frame_size.push(fsize);
    }
    Ok(TokenGrid {
        num_frames: groups.len(),
        patches: l,
        dim: d,
        features,
        token_size,
        frame_size,
        cls: grid.cls.clone(),
    })
}

/// Average a group of tokens; returns the merged feature and total size.
fn merge_tokens<'a>(
    members: impl Iterator<Item = (&'a [f32], f64)>,
    dim: usize,
    weighting: MergeWeighting,
) -> (Vec<f32>, f64) {
    let mut acc = vec![0.0f64; dim];
    let mut total_w = 0.0f64;
    let mut total_size = 0.0f64;
    let mut count = 0usize;
    let mut first: Option<&[f32]> = None;
    for (x, size) in members {
        let w = match weighting {
            MergeWeighting::Sized => size,
            MergeWeighting::Pairwise => 1.0,
        };
        for (a, &v) in acc.iter_mut().zip(x) {
            *a += w * v as f64;
        }
        total_w += w;
        total_size += size;
        count += 1;
        first.get_or_insert(x);
    }
    if count == 1 {
        // Singleton groups pass through untouched.
        return (first.unwrap().to_vec(), total_size);
    }
    (
        acc.into_iter().map(|a| (a / total_w) as f32).collect(),
        total_size,
    )
}

/// Choose the `r` lowest-scoring tokens to drop (ties → lower index).
pub fn prune_plan(scores: &[f64], r: usize) -> Result<PrunePlan> {
    let n = scores.len();
    if r > n.saturating_sub(1) {
        return Err(TestaError::ReductionRange {
            r,
            n,
            min: 0,
            max: n.saturating_sub(1),
        });
    }
    let mut removed = lowest(scores, r);
    removed.sort_unstable();
    let kept_order = kept_after(n, removed.iter().copied());
    Ok(PrunePlan {
        n,
        removed,
        kept_order,
    })
}

/// Drop the `r` lowest-scoring frames or patches. Surviving tokens keep
/// their sizes, so constituent mass is lost.
pub fn prune(
    grid: &TokenGrid,
    scores: &[f64],
    r: usize,
    dimension: Dimension,
) -> Result<(TokenGrid, PrunePlan)> {
    let n = match dimension {
        Dimension::Temporal => grid.num_frames,
        Dimension::Spatial => grid.patches,
    };
    if scores.len() != n {
        return Err(TestaError::shape(
            "prune",
            format!("{n} tokens, {} scores", scores.len()),
        ));
    }
    let plan = prune_plan(scores, r)?;
    Ok((apply_prune(grid, &plan, dimension)?, plan))
}

pub fn apply_prune(grid: &TokenGrid, plan: &PrunePlan, dimension: Dimension) -> Result<TokenGrid> {
    plan.validate()?;
    let (t, l, d) = (grid.num_frames, grid.patches, grid.dim);
    let keep = &plan.kept_order;
    let mut out = TokenGrid {
        num_frames: t,
        patches: l,
        dim: d,
        features: Vec::new(),
        token_size: Vec::new(),
        frame_size: grid.frame_size.clone(),
        cls: grid.cls.clone(),
    };
    match dimension {
        Dimension::Temporal => {
            if plan.n != t {
                return Err(TestaError::StalePlan(format!(
                    "prune plan for {} frames, grid has {t}",
                    plan.n
                )));
            }
            for &ti in keep {
                out.features
                    .extend_from_slice(&grid.features[ti * l * d..(ti + 1) * l * d]);
                out.token_size
                    .extend_from_slice(&grid.token_size[ti * l..(ti + 1) * l]);
            }
            out.frame_size = keep.iter().map(|&ti| grid.frame_size[ti]).collect();
            out.num_frames = keep.len();
        }
        Dimension::Spatial => {
            if plan.n != l {
                return Err(TestaError::StalePlan(format!(
                    "prune plan for {} patches, grid has {l}",
                    plan.n
                )));
            }
            for ti in 0..t {
                for &li in keep {
                    out.features.extend_from_slice(grid.token(ti, li));
                    out.token_size.push(grid.size(ti, li));
                }
            }
            out.patches = keep.len();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn keys(rows: &[[f32; 2]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn grid(t: usize, l: usize, d: usize, f: Vec<f32>) -> TokenGrid {
        TokenGrid::from_features(t, l, d, f, vec![0.0; d]).unwrap()
    }

    #[test]
    fn importance_hand_example() {
        let a = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.6]]).unwrap();
        let s = importance_scores(&a).unwrap();
        assert!((s[0] - 0.4).abs() < 1e-7);
        assert!((s[1] - 0.1).abs() < 1e-7);
        let p = plan_importance(&keys(&[[1.0, 0.0], [0.0, 1.0]]), &s, 1).unwrap();
        assert_eq!(p.pairs, vec![(1, 0)]);
        assert_eq!(p.kept_order, vec![0]);
    }

    #[test]
    fn uniform_attention_importance() {
        let n = 5;
        let a = Matrix::new(n, n, vec![1.0 / n as f32; n * n]).unwrap();
        for s in importance_scores(&a).unwrap() {
            assert!((s - (n as f64 - 1.0) / n as f64).abs() < 1e-6);
        }
        assert!(importance_scores(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn importance_score_identity_on_random_stochastic() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..12);
            let raw = Matrix::new(
                n,
                n,
                (0..n * n).map(|_| rng.random_range(-4.0..4.0)).collect(),
            )
            .unwrap();
            let a = crate::tensors::softmax_rows(&raw, 1.0).unwrap();
            let total: f64 = importance_scores(&a).unwrap().iter().sum();
            assert!((total - (n as f64 - a.trace())).abs() < 1e-5);
        }
    }

    #[test]
    fn importance_full_reduction_collapses_to_one() {
        let k = keys(&[[1.0, 0.1], [0.2, 1.0], [1.0, 1.0], [0.5, -1.0]]);
        let p = plan_importance(&k, &[0.3, 0.9, 0.1, 0.2], 3).unwrap();
        assert_eq!(p.kept_order, vec![1]);
        assert!(p.pairs.iter().all(|&(_, d)| d == 1));
        assert!(plan_importance(&k, &[0.0; 4], 4).is_err());
        assert!(plan_importance(&k, &[0.0; 4], 0).is_err());
    }

    #[test]
    fn importance_ties_pick_lower_index() {
        let k = keys(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let p = plan_importance(&k, &[0.2, 0.2, 0.9], 1).unwrap();
        assert_eq!(p.pairs, vec![(0, 1)]);
    }

    #[test]
    fn geometry_tie_break_example() {
        let k = keys(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        let p = plan_geometry(&k, 1).unwrap();
        assert_eq!(p.candidates.len(), 2);
        assert_eq!((p.candidates[0].dst, p.candidates[0].similarity), (1, 1.0));
        assert_eq!((p.candidates[1].dst, p.candidates[1].similarity), (3, 1.0));
        assert_eq!(p.pairs, vec![(0, 1)]);
        assert_eq!(p.kept_order, vec![1, 2, 3]);
        let p2 = plan_geometry(&k, 2).unwrap();
        assert_eq!(p2.pairs, vec![(0, 1), (2, 3)]);
        assert_eq!(p2.output_len(), 2);
        assert!(plan_geometry(&k, 3).is_err());
    }

    #[test]
    fn geometry_identical_keys_merge_every_even() {
        let k = Matrix::new(7, 3, vec![0.5; 21]).unwrap();
        let p = plan_geometry(&k, 3).unwrap();
        assert_eq!(
            p.pairs.iter().map(|p| p.0).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
        assert!(p.pairs.iter().all(|&(_, d)| d % 2 == 1));
    }

    #[test]
    fn oracle_singleton() {
        let k = keys(&[[1.0, 2.0], [3.0, -1.0]]);
        let p = oracle_best_pairs(&k, &[true, false], 1).unwrap();
        assert_eq!(p.pairs, vec![(0, 1)]);
        let big = Matrix::zeros(13, 2);
        assert!(matches!(
            oracle_best_pairs(&big, &[true; 13], 1),
            Err(TestaError::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn merging_identical_patches_keeps_feature() {
        let g = grid(1, 2, 3, vec![0.3, -0.7, 2.0, 0.3, -0.7, 2.0]);
        let p = MergePlan::from_candidates(
            2,
            vec![Candidate {
                src: 0,
                dst: 1,
                similarity: 1.0,
                merged: true,
            }],
        )
        .unwrap();
        let out = apply_spatial(&g, &p, MergeWeighting::Sized).unwrap();
        assert_eq!(out.patches, 1);
        assert_eq!(out.token(0, 0), &[0.3, -0.7, 2.0]);
        assert_eq!(out.token_size, vec![2.0]);
    }

    #[test]
    fn sized_merge_is_weighted_mean() {
        let mut g = grid(1, 2, 1, vec![2.0, 4.0]);
        g.token_size = vec![1.0, 3.0];
        let p = MergePlan::from_candidates(
            2,
            vec![Candidate {
                src: 0,
                dst: 1,
                similarity: 0.5,
                merged: true,
            }],
        )
        .unwrap();
        let out = apply_spatial(&g, &p, MergeWeighting::Sized).unwrap();
        assert_eq!(out.features, vec![3.5]);
        assert_eq!(out.token_size, vec![4.0]);
        let naive = apply_spatial(&g, &p, MergeWeighting::Pairwise).unwrap();
        assert_eq!(naive.features, vec![3.0]);
        assert_eq!(naive.token_size, vec![4.0]);
    }

    #[test]
    fn stale_plan_rejected() {
        let g = grid(1, 2, 1, vec![2.0, 4.0]);
        let p = plan_geometry(&Matrix::new(4, 1, vec![1.0; 4]).unwrap(), 1).unwrap();
        assert!(matches!(
            apply_spatial(&g, &p, MergeWeighting::Sized),
            Err(TestaError::StalePlan(_))
        ));
        assert!(matches!(
            apply_temporal(&g, &p, MergeWeighting::Sized),
            Err(TestaError::StalePlan(_))
        ));
    }

    #[test]
    fn temporal_merge_averages_positionally() {
        // frame A = [p, q], frame B = [r, s]
        let (p, q, r, s) = (1.0f32, 2.0, 5.0, -4.0);
        let g = grid(2, 2, 1, vec![p, q, r, s]);
        let plan = MergePlan::from_candidates(
            2,
            vec![Candidate {
                src: 0,
                dst: 1,
                similarity: 0.9,
                merged: true,
            }],
        )
        .unwrap();
        let out = apply_temporal(&g, &plan, MergeWeighting::Sized).unwrap();
        assert_eq!(out.num_frames, 1);
        assert_eq!(out.features, vec![(p + r) / 2.0, (q + s) / 2.0]);
        assert_eq!(out.frame_size, vec![2.0]);
        assert_eq!(out.token_size, vec![1.0, 1.0]);
    }

    #[test]
    fn merging_identical_frames_keeps_features() {
        let f = vec![0.1, 0.2, 0.3, 0.4];
        let mut all = f.clone();
        all.extend(&f);
        let g = grid(2, 2, 2, all);
        let plan = MergePlan::from_candidates(
            2,
            vec![Candidate {
                src: 1,
                dst: 0,
                similarity: 1.0,
                merged: true,
            }],
        )
        .unwrap();
        let out = apply_temporal(&g, &plan, MergeWeighting::Sized).unwrap();
        assert_eq!(out.features, f);
        assert_eq!(out.frame_size, vec![2.0]);
    }

    #[test]
    fn prune_examples() {
        let g = grid(2, 1, 1, vec![7.0, 9.0]);
        let (out, plan) = prune(&g, &[0.4, 0.1], 1, Dimension::Temporal).unwrap();
        assert_eq!(plan.removed, vec![1]);
        assert_eq!(out.features, vec![7.0]);
        assert!(out.total_constituents() < g.total_constituents());
        let (same, _) = prune(&g, &[0.4, 0.1], 0, Dimension::Temporal).unwrap();
        assert_eq!(same, g);
        assert!(prune(&g, &[0.4, 0.1], 2, Dimension::Temporal).is_err());
    }

    fn random_keys(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::new(
            n,
            d,
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn planners_match_oracle() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=10);
            let k = random_keys(&mut rng, n, 4);
            for r in 1..=n / 2 {
                let evens: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
                assert_eq!(
                    plan_geometry(&k, r).unwrap(),
                    oracle_best_pairs(&k, &evens, r).unwrap()
                );
            }
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            for r in 1..n {
                let p = plan_importance(&k, &scores, r).unwrap();
                let mut in_a = vec![false; n];
                p.candidates.iter().for_each(|c| in_a[c.src] = true);
                assert_eq!(p, oracle_best_pairs(&k, &in_a, r).unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn spatial_merge_conserves_mass(
            t in 1usize..4, l in 2usize..10, seed in any::<u64>(), frac in 0.0f64..1.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let mut g = grid(t, l, d, (0..t * l * d).map(|_| rng.random_range(-1.0..1.0)).collect());
            g.token_size.iter_mut().for_each(|s| *s = rng.random_range(1..4) as f64);
            let before: Vec<f64> = (0..t).map(|ti| (0..l).map(|li| g.size(ti, li)).sum()).collect();
            let r = 1 + ((l / 2 - 1) as f64 * frac) as usize;
            let plan = plan_geometry(&random_keys(&mut rng, l, 4), r).unwrap();
            let out = apply_spatial(&g, &plan, MergeWeighting::Sized).unwrap();
            prop_assert_eq!(out.patches, l - r);
            for (ti, &b) in before.iter().enumerate() {
                let after: f64 = (0..out.patches).map(|li| out.size(ti, li)).sum();
                prop_assert_eq!(after, b);
            }
            prop_assert_eq!(out.cls, g.cls);
            prop_assert_eq!(out.dim, d);
        }

        #[test]
        fn temporal_merge_conserves_frames(t in 2usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, d) = (3, 2);
            let g = grid(t, l, d, (0..t * l * d).map(|_| rng.random_range(-1.0..1.0)).collect());
            let r = rng.random_range(1..t);
            let scores: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            let plan = plan_importance(&random_keys(&mut rng, t, 4), &scores, r).unwrap();
            let out = apply_temporal(&g, &plan, MergeWeighting::Sized).unwrap();
            prop_assert_eq!(out.frame_size.iter().sum::<f64>(), t as f64);
            prop_assert!((out.total_constituents() - (t * l) as f64).abs() < 1e-9);
        }

        #[test]
        fn geometry_plan_is_permutation_covariant_within_parity(seed in any::<u64>(), n in 4usize..11) {
            // swapping two even positions (and two odd positions) relabels
            // the plan but keeps its merge structure
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_keys(&mut rng, n, 5);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.swap(0, 2);
            perm.swap(1, 3);
            let pk = k.select_rows(&perm);
            let r = n / 2;
            let a = plan_geometry(&k, r).unwrap();
            let b = plan_geometry(&pk, r).unwrap();
            let mut mapped: Vec<(usize, usize)> = b.pairs.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
            mapped.sort_unstable();
            prop_assert_eq!(mapped, a.pairs);
        }
    }
}
