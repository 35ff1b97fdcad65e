//! Geometric-semantic matching between trajectories.
//!
//! Nodes are compared by their sector vectors under the best cyclic rotation,
//! correspondences are filtered with a mutual-KNN test, and a rigid SE(2)
//! transform between the two node sets is estimated with seeded RANSAC plus a
//! closed-form least-squares refit on the inliers.

use crate::geom::{wrap_angle, Point};
use crate::gridmap::{SectorLabel, SectorVector, SECTOR_COUNT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Weight of a sector where both vectors name the same semantic category.
pub const W_SEM: f64 = 2.0;
/// Weight of a sector where both vectors agree on free, obstacle, or unknown.
pub const W_STRUCT: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("RANSAC needs at least 2 correspondences, got {0}")]
    TooFewPairs(usize),
    #[error("correspondence ({0}, {1}) indexes past the position slices")]
    PairOutOfRange(usize, usize),
}

// ============================================================================
// Sector-vector similarity
// ============================================================================

/// Cyclically rotates a sector vector: output sector `i` takes the label of
/// input sector `i − k` (mod 12), so the pattern turns counterclockwise by
/// `k` sectors. Rotation by 12 is the identity.
pub fn rotate_sector(s: &SectorVector, k: i32) -> SectorVector {
    let mut out = [SectorLabel::Free; SECTOR_COUNT];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = s.get((i as i32 - k).rem_euclid(SECTOR_COUNT as i32) as usize);
    }
    SectorVector(out)
}

/// Weighted per-sector agreement, normalized by the best score `a` could
/// achieve against a perfect copy of itself. Matching categories count
/// double because they are rarer than structural agreement. The
/// normalization makes this a recall measure for `a`: it is asymmetric
/// unless both vectors hold the same label multiset.
pub fn sector_similarity(a: &SectorVector, b: &SectorVector) -> f64 {
    let weight = |l: SectorLabel| match l {
        SectorLabel::Category(_) => W_SEM,
        _ => W_STRUCT,
    };
    let mut achieved = 0.0;
    let mut max = 0.0;
    for k in 0..SECTOR_COUNT {
        let (la, lb) = (a.get(k), b.get(k));
        max += weight(la);
        if la == lb {
            achieved += weight(la);
        }
    }
    achieved / max
}

/// Best similarity between two sector vectors over all 12 cyclic rotations
/// of `a`, together with the rotation that achieves it. Ties prefer the
/// smallest rotation index.
pub fn node_similarity(a: &SectorVector, b: &SectorVector) -> (f64, usize) {
    let mut best = (sector_similarity(a, b), 0);
    for k in 1..SECTOR_COUNT {
        let s = sector_similarity(&rotate_sector(a, k as i32), b);
        if s > best.0 {
            best = (s, k);
        }
    }
    best
}

// ============================================================================
// Correspondences
// ============================================================================

/// Node pairs surviving the mutual-KNN filter: (query index, target index,
/// similarity score), sorted by query index then target index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize, f64)>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Indices of the K highest entries of `scores`, ties broken by lower index.
fn top_k(scores: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = scores.enumerate().collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    order.truncate(k);
    order.into_iter().map(|(i, _)| i).collect()
}

/// Bidirectional K-nearest-neighbor matching over the full rotational
/// similarity matrix. A pair (i, j) is kept iff j is among the K best
/// targets for query i, i is among the K best queries for target j, and the
/// score is strictly positive.
pub fn semantic_match(
    query_nodes: &[SectorVector],
    target_nodes: &[SectorVector],
    k: usize,
) -> CorrespondenceSet {
    let sim: Vec<Vec<f64>> = query_nodes
        .iter()
        .map(|q| target_nodes.iter().map(|t| node_similarity(q, t).0).collect())
        .collect();
    let row_top: Vec<Vec<usize>> =
        (0..query_nodes.len()).map(|i| top_k(sim[i].iter().copied(), k)).collect();
    let col_top: Vec<Vec<usize>> = (0..target_nodes.len())
        .map(|j| top_k(sim.iter().map(|row| row[j]), k))
        .collect();
    let mut pairs = Vec::new();
    for (i, tops) in row_top.iter().enumerate() {
        for &j in tops {
            if sim[i][j] > 0.0 && col_top[j].contains(&i) {
                pairs.push((i, j, sim[i][j]));
            }
        }
    }
    pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    CorrespondenceSet { pairs }
}

// ============================================================================
// SE(2) transforms
// ============================================================================

/// A rigid planar transform: rotate by `rotation`, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se2Transform {
    /// Radians in (−π, π].
    pub rotation: f64,
    pub translation: Point,
}

impl Se2Transform {
    pub fn new(rotation: f64, translation: Point) -> Self {
        Se2Transform { rotation: wrap_angle(rotation), translation }
    }

    pub fn identity() -> Self {
        Se2Transform { rotation: 0.0, translation: Point::new(0.0, 0.0) }
    }

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        Point::new(
            c * p.x - s * p.y + self.translation.x,
            s * p.x + c * p.y + self.translation.y,
        )
    }

    pub fn inverse(&self) -> Se2Transform {
        let (s, c) = self.rotation.sin_cos();
        // R⁻¹ = R(−θ); t⁻¹ = −R(−θ)·t.
        let t = self.translation;
        Se2Transform::new(-self.rotation, Point::new(-(c * t.x + s * t.y), -(-s * t.x + c * t.y)))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Se2Transform) -> Se2Transform {
        Se2Transform::new(self.rotation + other.rotation, self.apply(other.translation))
    }
}

impl std::fmt::Display for Se2Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "rot {:.4} rad, t ({:.3}, {:.3})", self.rotation, self.translation.x, self.translation.y)
    }
}

/// Outcome of aligning a query node set to a target node set.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Maps query positions into the target frame.
    pub transform: Se2Transform,
    /// Inliers over all input correspondences, in [0, 1].
    pub inlier_ratio: f64,
    pub inliers: CorrespondenceSet,
}

/// Exact SE(2) solution from two point pairs. `None` when either segment is
/// too short to define a direction.
fn solve_from_two(p1: Point, p2: Point, q1: Point, q2: Point) -> Option<Se2Transform> {
    let (pdx, pdy) = (p2.x - p1.x, p2.y - p1.y);
    let (qdx, qdy) = (q2.x - q1.x, q2.y - q1.y);
    if pdx.hypot(pdy) < 1e-9 || qdx.hypot(qdy) < 1e-9 {
        return None;
    }
    let theta = qdy.atan2(qdx) - pdy.atan2(pdx);
    let (s, c) = theta.sin_cos();
    let t = Point::new(q1.x - (c * p1.x - s * p1.y), q1.y - (s * p1.x + c * p1.y));
    Some(Se2Transform::new(theta, t))
}

/// Least-squares SE(2) fit (2-D Procrustes) over the given pairs.
fn procrustes(pairs: &[(usize, usize, f64)], query_pos: &[Point], target_pos: &[Point]) -> Se2Transform {
    let n = pairs.len() as f64;
    let (mut mqx, mut mqy, mut mtx, mut mty) = (0.0, 0.0, 0.0, 0.0);
    for &(i, j, _) in pairs {
        mqx += query_pos[i].x;
        mqy += query_pos[i].y;
        mtx += target_pos[j].x;
        mty += target_pos[j].y;
    }
    let (mqx, mqy, mtx, mty) = (mqx / n, mqy / n, mtx / n, mty / n);
    let (mut dot, mut cross) = (0.0, 0.0);
    for &(i, j, _) in pairs {
        let (ax, ay) = (query_pos[i].x - mqx, query_pos[i].y - mqy);
        let (bx, by) = (target_pos[j].x - mtx, target_pos[j].y - mty);
        dot += ax * bx + ay * by;
        cross += ax * by - ay * bx;
    }
    // Coincident points leave the rotation unobservable; atan2(0,0)=0 picks
    // the pure translation.
    let theta = cross.atan2(dot);
    let (s, c) = theta.sin_cos();
    let t = Point::new(mtx - (c * mqx - s * mqy), mty - (s * mqx + c * mqy));
    Se2Transform::new(theta, t)
}

fn count_inliers<'a>(
    t: &Se2Transform,
    pairs: &'a [(usize, usize, f64)],
    query_pos: &[Point],
    target_pos: &[Point],
    tol: f64,
) -> Vec<(usize, usize, f64)> {
    pairs
        .iter()
        .filter(|&&(i, j, _)| t.apply(query_pos[i]).distance(&target_pos[j]) <= tol)
        .copied()
        .collect()
}

/// Seeded-deterministic RANSAC over point correspondences.
///
/// Each iteration samples two distinct pairs, solves the exact transform,
/// and counts pairs mapped within `inlier_tol` meters. The best hypothesis
/// is refit by least squares on its inliers and the inlier set is recounted
/// under the refit transform. When every sample is degenerate (all points
/// coincident) the result is the pure translation between centroids.
pub fn estimate_se2_ransac(
    corr: &CorrespondenceSet,
    query_pos: &[Point],
    target_pos: &[Point],
    iters: u32,
    inlier_tol: f64,
    seed: u64,
) -> Result<MatchResult, MatchError> {
    let pairs = &corr.pairs;
    if pairs.len() < 2 {
        return Err(MatchError::TooFewPairs(pairs.len()));
    }
    for &(i, j, _) in pairs {
        if i >= query_pos.len() || j >= target_pos.len() {
            return Err(MatchError::PairOutOfRange(i, j));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Se2Transform)> = None;
    for _ in 0..iters {
        let picked = rand::seq::index::sample(&mut rng, pairs.len(), 2);
        let (a, b) = (pairs[picked.index(0)], pairs[picked.index(1)]);
        let Some(t) = solve_from_two(query_pos[a.0], query_pos[b.0], target_pos[a.1], target_pos[b.1])
        else {
            continue;
        };
        let n_in = count_inliers(&t, pairs, query_pos, target_pos, inlier_tol).len();
        if best.as_ref().map_or(true, |(bn, _)| n_in > *bn) {
            best = Some((n_in, t));
        }
    }
    let hypothesis = match best {
        Some((_, t)) => t,
        // Every pair of points was coincident.
        None => procrustes(pairs, query_pos, target_pos),
    };
    let support = count_inliers(&hypothesis, pairs, query_pos, target_pos, inlier_tol);
    let refit = if support.len() >= 2 { procrustes(&support, query_pos, target_pos) } else { hypothesis };
    let inliers = count_inliers(&refit, pairs, query_pos, target_pos, inlier_tol);
    let inlier_ratio = inliers.len() as f64 / pairs.len() as f64;
    Ok(MatchResult { transform: refit, inlier_ratio, inliers: CorrespondenceSet { pairs: inliers } })
}
