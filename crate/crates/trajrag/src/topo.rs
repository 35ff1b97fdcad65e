//! Topological-polar trajectories.
//!
//! Free space is thinned to a one-cell skeleton; skeleton pixels whose
//! neighborhood splits into three or more branches become junction nodes;
//! nearby junctions are merged by a minimum-distance pass. A pose trace is
//! then compressed to the sequence of nearest nodes with backtracking loops
//! removed, each node carrying the 12-sector polar fingerprint of its
//! location. The result is compact, viewpoint-light, and cheap to match.

use crate::geom::{Cell, Point};
use crate::gridmap::{GridError, Mask, PolarSampler, SectorLabel, SectorVector, SemanticMap, SECTOR_COUNT};
use crate::textio::{tokens, LineCursor, TextError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TopoError {
    #[error("no nodes could be derived from the map")]
    NoNodes,
    #[error("pose list is empty")]
    NoPoses,
    #[error("node list is empty")]
    NoNodesToAssign,
    #[error("pixel ({0}, {1}) lies outside the map")]
    PixelOutOfBounds(i32, i32),
    #[error("goal category {0} out of range (map has {1})")]
    GoalOutOfRange(u16, usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Parameters of the map-to-trajectory compression.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoConfig {
    /// Minimum world-space distance between kept junction nodes, in meters.
    pub d_min: f64,
    /// Polar sampling radius around each node, in meters.
    pub sample_range: f64,
    /// Disc radius (cells) for the semantic scratch dilation used while
    /// sampling sector vectors.
    pub dilation_radius: u32,
}

impl Default for TopoConfig {
    fn default() -> Self {
        TopoConfig { d_min: 0.5, sample_range: 1.5, dilation_radius: 2 }
    }
}

/// Identifier of a node within one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One junction node: where it is and what its surroundings look like.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoNode {
    pub id: NodeId,
    /// Position in the trajectory's own frame, meters.
    pub world_pos: Point,
    pub sector_vector: SectorVector,
}

/// A loop-free node sequence with a navigation goal. Edges are exactly the
/// directed consecutive pairs of `nodes`, so they are derived, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoPolarTrajectory {
    /// Visit order. Node ids are pairwise distinct.
    pub nodes: Vec<TopoNode>,
    pub goal_category: u16,
    /// Free-form provenance tag (scene/episode name); single line.
    pub source_tag: String,
}

impl TopoPolarTrajectory {
    /// Directed edges between consecutive nodes.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.nodes.windows(2).map(|w| (w[0].id, w[1].id))
    }

    pub fn node(&self, id: NodeId) -> Option<&TopoNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn sector_vectors(&self) -> Vec<SectorVector> {
        self.nodes.iter().map(|n| n.sector_vector).collect()
    }

    pub fn positions(&self) -> Vec<Point> {
        self.nodes.iter().map(|n| n.world_pos).collect()
    }

    /// Checks the structural invariants: distinct ids, single-line tag.
    pub fn validate(&self) -> Result<(), TopoError> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(TopoError::Grid(GridError::Invariant(format!("duplicate node id {}", n.id))));
            }
        }
        if self.source_tag.contains('\n') {
            return Err(TopoError::Grid(GridError::Invariant("source tag spans lines".into())));
        }
        Ok(())
    }
}

// ============================================================================
// Skeletonization
// ============================================================================

/// The 8 neighbors of a pixel in circular ring order.
const RING: [(i32, i32); 8] =
    [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

fn ring_bits(mask: &Mask, x: i32, y: i32) -> [bool; 8] {
    let mut bits = [false; 8];
    for (i, (dx, dy)) in RING.iter().enumerate() {
        bits[i] = mask.get(x + dx, y + dy);
    }
    bits
}

fn neighbor_count(bits: &[bool; 8]) -> usize {
    bits.iter().filter(|b| **b).count()
}

/// Number of distinct runs of set pixels around the ring: the count of
/// false-to-true transitions walking the ring circularly. A fully set ring is
/// one run.
fn arc_count(bits: &[bool; 8]) -> usize {
    if bits.iter().all(|b| *b) {
        return 1;
    }
    let mut arcs = 0;
    for i in 0..8 {
        if !bits[i] && bits[(i + 1) % 8] {
            arcs += 1;
        }
    }
    arcs
}

/// Thins a mask to a one-cell-wide skeleton.
///
/// Each iteration runs two parallel subcycles: the first peels pixels open to
/// the north or east, the second those open to the south or west, deleting
/// only pixels whose ring neighborhood forms a single run of 2..=6 set
/// neighbors. Peeling from opposite sides in alternation keeps the skeleton
/// centered; the single-run condition preserves connectivity and never
/// removes endpoints, so every component of the input survives as exactly one
/// component of the output.
pub fn skeletonize(mask: &Mask) -> Mask {
    let mut skel = mask.clone();
    // (border direction offsets) per subcycle.
    let subcycles: [&[(i32, i32)]; 2] = [&[(0, -1), (1, 0)], &[(0, 1), (-1, 0)]];
    loop {
        let mut changed = false;
        for dirs in subcycles {
            let mut deletions = Vec::new();
            for cell in skel.iter_set() {
                let open = dirs.iter().any(|(dx, dy)| !skel.get(cell.x + dx, cell.y + dy));
                if !open {
                    continue;
                }
                let bits = ring_bits(&skel, cell.x, cell.y);
                let b = neighbor_count(&bits);
                if (2..=6).contains(&b) && arc_count(&bits) == 1 {
                    deletions.push(cell);
                }
            }
            for cell in &deletions {
                skel.set(cell.x, cell.y, false);
            }
            changed |= !deletions.is_empty();
        }
        if !changed {
            return skel;
        }
    }
}

// ============================================================================
// Junction nodes
// ============================================================================

/// Skeleton pixels whose neighborhood splits into at least three branches,
/// in raster order.
pub fn detect_candidate_nodes(skel: &Mask) -> Vec<Cell> {
    skel.iter_set()
        .filter(|c| arc_count(&ring_bits(skel, c.x, c.y)) >= 3)
        .collect()
}

/// Skeleton pixels with at most one neighbor (line ends and isolated pixels),
/// in raster order.
pub fn skeleton_endpoints(skel: &Mask) -> Vec<Cell> {
    skel.iter_set()
        .filter(|c| neighbor_count(&ring_bits(skel, c.x, c.y)) <= 1)
        .collect()
}

/// Greedy minimum-distance suppression. Candidates are visited in raster
/// order (row, then column) and kept only when at least `d_min` meters from
/// every candidate kept so far, so the output is pairwise at least `d_min`
/// apart and every dropped candidate is within `d_min` of a kept one.
pub fn suppress_nodes(candidates: &[Cell], d_min: f64, resolution: f64) -> Vec<Cell> {
    let mut sorted: Vec<Cell> = candidates.to_vec();
    sorted.sort();
    let mut kept: Vec<Cell> = Vec::new();
    for c in sorted {
        if kept.iter().all(|k| k.distance(&c) * resolution >= d_min) {
            kept.push(c);
        }
    }
    kept
}

/// Samples a sector vector at each pixel and wraps them as nodes with
/// sequential ids in input order.
pub fn build_nodes(
    map: &SemanticMap,
    pixels: &[Cell],
    cfg: &TopoConfig,
) -> Result<Vec<TopoNode>, TopoError> {
    let sampler = PolarSampler::new(map, cfg.dilation_radius);
    let mut nodes = Vec::with_capacity(pixels.len());
    for (i, px) in pixels.iter().enumerate() {
        if !map.in_bounds(*px) {
            return Err(TopoError::PixelOutOfBounds(px.x, px.y));
        }
        let world_pos = map.cell_center(*px);
        let sector_vector = sampler.sector_vector(world_pos, cfg.sample_range)?;
        nodes.push(TopoNode { id: NodeId(i as u32), world_pos, sector_vector });
    }
    Ok(nodes)
}

/// Maps each pose to the id of its Euclidean-nearest node; distance ties go
/// to the lowest node id.
pub fn assign_to_nearest(poses: &[Point], nodes: &[TopoNode]) -> Result<Vec<NodeId>, TopoError> {
    if nodes.is_empty() {
        return Err(TopoError::NoNodesToAssign);
    }
    Ok(poses
        .iter()
        .map(|p| {
            let mut best = nodes[0].id;
            let mut best_d = p.distance(&nodes[0].world_pos);
            for n in &nodes[1..] {
                let d = p.distance(&n.world_pos);
                if d < best_d || (d == best_d && n.id < best) {
                    best_d = d;
                    best = n.id;
                }
            }
            best
        })
        .collect())
}

/// Removes backtracking from a node visit sequence.
///
/// Consecutive duplicates collapse first. Then, scanning in temporal order,
/// every time a node reappears all elements from its previous occurrence up
/// to (but excluding) the latest occurrence are deleted, keeping the latest.
/// The result visits each node at most once and is a subsequence of the
/// duplicate-collapsed input.
pub fn prune_loops(seq: &[NodeId]) -> Vec<NodeId> {
    let mut out: Vec<NodeId> = Vec::new();
    let mut pos: BTreeMap<NodeId, usize> = BTreeMap::new();
    for &x in seq {
        if let Some(&p) = pos.get(&x) {
            // Reappearance: drop everything from the previous occurrence on,
            // then re-append as the latest occurrence.
            for dropped in out.drain(p..) {
                pos.remove(&dropped);
            }
        }
        pos.insert(x, out.len());
        out.push(x);
    }
    out
}

// ============================================================================
// Full compression pipeline
// ============================================================================

/// Compresses a pose trace over a map into a topological-polar trajectory.
///
/// Pipeline: skeletonize free space, detect junction pixels, suppress within
/// `d_min`, sample sector vectors, assign each pose to its nearest node, and
/// prune loops. Maps whose skeleton has no junctions (straight corridors,
/// single rooms) fall back to skeleton endpoints plus the pixel nearest the
/// skeleton centroid, so a trajectory can still be formed.
pub fn build_topo_polar_trajectory(
    map: &SemanticMap,
    poses: &[Point],
    goal_category: u16,
    cfg: &TopoConfig,
    source_tag: &str,
) -> Result<TopoPolarTrajectory, TopoError> {
    if poses.is_empty() {
        return Err(TopoError::NoPoses);
    }
    if goal_category as usize >= map.categories().len() {
        return Err(TopoError::GoalOutOfRange(goal_category, map.categories().len()));
    }
    let skel = skeletonize(&map.free_mask());
    let mut pixels = suppress_nodes(&detect_candidate_nodes(&skel), cfg.d_min, map.resolution());
    if pixels.is_empty() {
        pixels = suppress_nodes(&degenerate_fallback(&skel), cfg.d_min, map.resolution());
    }
    if pixels.is_empty() {
        return Err(TopoError::NoNodes);
    }
    let nodes = build_nodes(map, &pixels, cfg)?;
    let visits = assign_to_nearest(poses, &nodes)?;
    let pruned = prune_loops(&visits);
    let by_id: BTreeMap<NodeId, &TopoNode> = nodes.iter().map(|n| (n.id, n)).collect();
    let nodes = pruned.iter().map(|id| by_id[id].clone()).collect();
    let traj = TopoPolarTrajectory { nodes, goal_category, source_tag: source_tag.to_string() };
    traj.validate()?;
    Ok(traj)
}

/// Node pixels for junction-free skeletons: the line endpoints plus the pixel
/// nearest the skeleton centroid (which covers closed loops, where endpoints
/// do not exist).
fn degenerate_fallback(skel: &Mask) -> Vec<Cell> {
    let mut pixels = skeleton_endpoints(skel);
    let n = skel.set_count();
    if n == 0 {
        return pixels;
    }
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for c in skel.iter_set() {
        sx += f64::from(c.x);
        sy += f64::from(c.y);
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let mid = skel
        .iter_set()
        .min_by(|a, b| {
            let da = (f64::from(a.x) - cx).hypot(f64::from(a.y) - cy);
            let db = (f64::from(b.x) - cx).hypot(f64::from(b.y) - cy);
            da.partial_cmp(&db).unwrap().then(a.cmp(b))
        })
        .expect("skeleton is non-empty");
    if !pixels.contains(&mid) {
        pixels.push(mid);
    }
    pixels.sort();
    pixels
}

// ============================================================================
// Natural-language description
// ============================================================================

/// Hour-hand direction for a sector index: sector 0 (east) is 3 o'clock and
/// hours decrease counterclockwise.
fn sector_clock(k: usize) -> usize {
    let h = (3 - k as i32).rem_euclid(12);
    if h == 0 {
        12
    } else {
        h as usize
    }
}

fn label_phrase(label: SectorLabel, categories: &[String]) -> Option<String> {
    match label {
        SectorLabel::Free => None,
        SectorLabel::Obstacle => Some("obstacle".to_string()),
        SectorLabel::Unknown => Some("unknown".to_string()),
        SectorLabel::Category(c) => Some(
            categories.get(c as usize).cloned().unwrap_or_else(|| format!("category {c}")),
        ),
    }
}

/// One clause describing a sector vector: non-free sectors listed by clock
/// direction, or "open space" when every sector is free.
pub fn describe_sector_vector(sv: &SectorVector, categories: &[String]) -> String {
    let mut parts = Vec::new();
    for k in 0..SECTOR_COUNT {
        if let Some(phrase) = label_phrase(sv.get(k), categories) {
            parts.push(format!("{} at {} o'clock", phrase, sector_clock(k)));
        }
    }
    if parts.is_empty() {
        "open space".to_string()
    } else {
        parts.join(", ")
    }
}

/// Deterministic single-line rendering of a trajectory: one clause per node
/// in visit order, terminated by the goal category.
pub fn describe_trajectory(traj: &TopoPolarTrajectory, categories: &[String]) -> String {
    let mut out = String::new();
    for (i, node) in traj.nodes.iter().enumerate() {
        out.push_str(&format!("node {}: {}. ", i + 1, describe_sector_vector(&node.sector_vector, categories)));
    }
    let goal = categories
        .get(traj.goal_category as usize)
        .cloned()
        .unwrap_or_else(|| format!("category {}", traj.goal_category));
    out.push_str(&format!("goal: {goal}."));
    out
}

// ============================================================================
// Text serialization
// ============================================================================

const TRAJ_HEADER: &str = "topotraj v1";

impl TopoPolarTrajectory {
    /// One record per node (id, x, y, 12 sector labels) plus source and goal
    /// lines. Floats round-trip bit-exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(TRAJ_HEADER);
        out.push('\n');
        out.push_str(&format!("source {}\n", self.source_tag));
        out.push_str(&format!("goal {}\n", self.goal_category));
        for n in &self.nodes {
            out.push_str(&format!(
                "node {} {} {} {}\n",
                n.id, n.world_pos.x, n.world_pos.y,
                n.sector_vector.tokens()
            ));
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<TopoPolarTrajectory, TopoError> {
        let mut cur = LineCursor::new(text);
        let traj = Self::parse_block(&mut cur)?;
        Ok(traj)
    }

    pub(crate) fn parse_block(cur: &mut LineCursor) -> Result<TopoPolarTrajectory, TopoError> {
        cur.expect(TRAJ_HEADER)?;
        let source_tag = cur.expect_key("source")?.to_string();
        let goal_s = cur.expect_key("goal")?;
        let goal_category: u16 = cur.parse_one(goal_s.trim(), "goal category")?;
        let mut nodes = Vec::new();
        loop {
            let line = cur.next()?;
            if line == "end" {
                break;
            }
            let rest = line
                .strip_prefix("node ")
                .ok_or_else(|| TextError::at(cur.line_no(), format!("expected `node ...` or `end`, found `{line}`")))?;
            let toks = tokens(rest);
            if toks.len() != 3 + SECTOR_COUNT {
                return Err(TextError::at(
                    cur.line_no(),
                    format!("node record expects id, x, y and {SECTOR_COUNT} labels"),
                )
                .into());
            }
            let id: u32 = cur.parse_one(toks[0], "node id")?;
            let x: f64 = cur.parse_one(toks[1], "node x")?;
            let y: f64 = cur.parse_one(toks[2], "node y")?;
            let mut labels = [SectorLabel::Free; SECTOR_COUNT];
            for (k, slot) in labels.iter_mut().enumerate() {
                *slot = SectorLabel::from_token(toks[3 + k])
                    .ok_or_else(|| TextError::at(cur.line_no(), format!("invalid sector label `{}`", toks[3 + k])))?;
            }
            nodes.push(TopoNode {
                id: NodeId(id),
                world_pos: Point::new(x, y),
                sector_vector: SectorVector(labels),
            });
        }
        let traj = TopoPolarTrajectory { nodes, goal_category, source_tag };
        traj.validate()?;
        Ok(traj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from_rows(rows: &[&str]) -> Mask {
        let h = rows.len() as u32;
        let w = rows[0].len() as u32;
        let mut m = Mask::new(w, h);
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                if ch == '#' {
                    m.set(x as i32, y as i32, true);
                }
            }
        }
        m
    }

    fn components(mask: &Mask) -> usize {
        let mut seen = Mask::new(mask.width(), mask.height());
        let mut count = 0;
        for start in mask.iter_set() {
            if seen.get(start.x, start.y) {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen.set(start.x, start.y, true);
            while let Some(c) = stack.pop() {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (c.x + dx, c.y + dy);
                        if mask.get(nx, ny) && !seen.get(nx, ny) {
                            seen.set(nx, ny, true);
                            stack.push(Cell::new(nx, ny));
                        }
                    }
                }
            }
        }
        count
    }

    fn has_2x2_block(mask: &Mask) -> bool {
        for y in 0..mask.height() as i32 - 1 {
            for x in 0..mask.width() as i32 - 1 {
                if mask.get(x, y) && mask.get(x + 1, y) && mask.get(x, y + 1) && mask.get(x + 1, y + 1) {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn skeleton_of_wide_corridor_is_single_centered_line() {
        let mut m = Mask::new(30, 9);
        for y in 2..7 {
            for x in 0..30 {
                m.set(x, y, true);
            }
        }
        let s = skeletonize(&m);
        let cells: Vec<Cell> = s.iter_set().collect();
        assert!(!cells.is_empty());
        for c in &cells {
            assert_eq!(c.y, 4, "skeleton stays on the center row, got {c:?}");
        }
        // Contiguous run, allowing a couple of cells of end erosion.
        let xs: Vec<i32> = cells.iter().map(|c| c.x).collect();
        let (lo, hi) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
        assert_eq!(cells.len() as i32, hi - lo + 1, "single unbroken run");
        assert!(cells.len() >= 24, "run keeps most of the corridor length: {}", cells.len());
    }

    #[test]
    fn skeleton_of_one_cell_corridor_is_unchanged() {
        let mut m = Mask::new(20, 5);
        for x in 0..20 {
            m.set(x, 2, true);
        }
        assert_eq!(skeletonize(&m), m);
    }

    #[test]
    fn skeleton_preserves_components_on_noise_masks() {
        // Per-pixel noise is adversarial: it is full of diagonal contacts
        // that pin pixels in place. Connectivity must survive regardless.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for round in 0..30 {
            let mut m = Mask::new(24, 20);
            for y in 0..20 {
                for x in 0..24 {
                    if rng.gen_bool(0.55) {
                        m.set(x, y, true);
                    }
                }
            }
            let s = skeletonize(&m);
            for c in s.iter_set() {
                assert!(m.get(c.x, c.y), "round {round}: skeleton is a subset of the input");
            }
            assert_eq!(
                components(&s),
                components(&m),
                "round {round}: every input component survives as exactly one skeleton component"
            );
        }
    }

    #[test]
    fn skeleton_of_room_layouts_is_thin() {
        // Unions of rectangles stand in for real free-space masks (rooms and
        // corridors). There the skeleton must also be one cell wide.
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for round in 0..30 {
            let mut m = Mask::new(40, 32);
            for _ in 0..rng.gen_range(3..8) {
                let w = rng.gen_range(3..14);
                let h = rng.gen_range(3..12);
                let x0 = rng.gen_range(0..40 - w);
                let y0 = rng.gen_range(0..32 - h);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        m.set(x, y, true);
                    }
                }
            }
            let s = skeletonize(&m);
            for c in s.iter_set() {
                assert!(m.get(c.x, c.y), "round {round}: skeleton is a subset of the input");
            }
            assert!(!has_2x2_block(&s), "round {round}: skeleton contains a 2x2 block");
            assert_eq!(
                components(&s),
                components(&m),
                "round {round}: component count is preserved"
            );
        }
    }

    #[test]
    fn plus_corridor_skeleton_has_a_junction_near_center() {
        let mut m = Mask::new(31, 31);
        for i in 0..31 {
            for w in 14..17 {
                m.set(i, w, true);
                m.set(w, i, true);
            }
        }
        let s = skeletonize(&m);
        let junctions = detect_candidate_nodes(&s);
        assert!(!junctions.is_empty(), "crossing corridors produce a junction");
        for j in &junctions {
            assert!(
                j.distance(&Cell::new(15, 15)) <= 2.5,
                "junction {j:?} sits near the crossing center"
            );
        }
    }

    #[test]
    fn t_junction_pixel_is_detected_exactly() {
        let m = mask_from_rows(&[
            ".....",
            "#####",
            "..#..",
            "..#..",
        ]);
        // Already thin; pixel (2,1) has west, east, and south branches.
        let junctions = detect_candidate_nodes(&m);
        assert_eq!(junctions, vec![Cell::new(2, 1)]);
    }

    #[test]
    fn x_junction_center_has_four_branches() {
        let m = mask_from_rows(&[
            "#...#",
            ".#.#.",
            "..#..",
            ".#.#.",
            "#...#",
        ]);
        let bits = ring_bits(&m, 2, 2);
        assert_eq!(arc_count(&bits), 4);
        assert_eq!(detect_candidate_nodes(&m), vec![Cell::new(2, 2)]);
    }

    #[test]
    fn straight_line_has_no_junctions() {
        let mut m = Mask::new(20, 3);
        for x in 0..20 {
            m.set(x, 1, true);
        }
        assert!(detect_candidate_nodes(&m).is_empty());
    }

    /// Independent branch counter: BFS over ring positions where two set
    /// positions connect iff circularly consecutive.
    fn oracle_branches(bits: &[bool; 8]) -> usize {
        let set: Vec<usize> = (0..8).filter(|i| bits[*i]).collect();
        if set.is_empty() {
            return 0;
        }
        let mut comp = vec![usize::MAX; 8];
        let mut n = 0;
        for &start in &set {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = n;
            while let Some(i) = stack.pop() {
                for j in [(i + 1) % 8, (i + 7) % 8] {
                    if bits[j] && comp[j] == usize::MAX {
                        comp[j] = n;
                        stack.push(j);
                    }
                }
            }
            n += 1;
        }
        n
    }

    #[test]
    fn branch_count_matches_ring_component_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let mut bits = [false; 8];
            for b in bits.iter_mut() {
                *b = rng.gen_bool(0.5);
            }
            let want = if bits.iter().all(|b| *b) { 1 } else { oracle_branches(&bits) };
            assert_eq!(arc_count(&bits), want, "bits {bits:?}");
        }
    }

    #[test]
    fn suppression_keeps_far_candidates_and_drops_near_ones() {
        // 0.3 m apart at 0.05 m/cell = 6 cells: suppressed.
        let near = vec![Cell::new(2, 2), Cell::new(8, 2)];
        assert_eq!(suppress_nodes(&near, 0.5, 0.05), vec![Cell::new(2, 2)]);
        // 1.0 m apart = 20 cells: both survive.
        let far = vec![Cell::new(2, 2), Cell::new(22, 2)];
        assert_eq!(suppress_nodes(&far, 0.5, 0.05), far);
    }

    #[test]
    fn suppression_output_is_pairwise_separated_and_maximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let cands: Vec<Cell> =
                (0..40).map(|_| Cell::new(rng.gen_range(0..30), rng.gen_range(0..30))).collect();
            let kept = suppress_nodes(&cands, 0.5, 0.05);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    assert!(a.distance(b) * 0.05 >= 0.5, "{a:?} vs {b:?}");
                }
            }
            for c in &cands {
                assert!(
                    kept.iter().any(|k| k.distance(c) * 0.05 < 0.5 || k == c),
                    "dropped candidate {c:?} is near no kept node"
                );
            }
        }
    }

    #[test]
    fn assignment_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let nodes: Vec<TopoNode> = (0..8)
            .map(|i| TopoNode {
                id: NodeId(i),
                world_pos: Point::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                sector_vector: SectorVector::uniform(SectorLabel::Free),
            })
            .collect();
        let poses: Vec<Point> =
            (0..50).map(|_| Point::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect();
        let got = assign_to_nearest(&poses, &nodes).unwrap();
        for (p, id) in poses.iter().zip(&got) {
            let d = p.distance(&nodes.iter().find(|n| n.id == *id).unwrap().world_pos);
            for n in &nodes {
                assert!(d <= p.distance(&n.world_pos) + 1e-12);
            }
        }
    }

    #[test]
    fn assignment_tie_goes_to_lowest_id() {
        let mk = |id, x| TopoNode {
            id: NodeId(id),
            world_pos: Point::new(x, 0.0),
            sector_vector: SectorVector::uniform(SectorLabel::Free),
        };
        // Pose exactly between nodes 2 and 5.
        let nodes = vec![mk(5, 1.0), mk(2, -1.0)];
        let got = assign_to_nearest(&[Point::new(0.0, 0.0)], &nodes).unwrap();
        assert_eq!(got, vec![NodeId(2)]);
    }

    #[test]
    fn assignment_without_nodes_is_an_error() {
        assert!(matches!(
            assign_to_nearest(&[Point::new(0.0, 0.0)], &[]),
            Err(TopoError::NoNodesToAssign)
        ));
    }

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|x| NodeId(*x)).collect()
    }

    #[test]
    fn prune_drops_detour_and_keeps_latest_occurrence() {
        assert_eq!(prune_loops(&ids(&[0, 1, 2, 1, 3])), ids(&[0, 1, 3]));
    }

    #[test]
    fn prune_collapses_consecutive_duplicates() {
        assert_eq!(prune_loops(&ids(&[0, 0, 0])), ids(&[0]));
    }

    #[test]
    fn prune_full_backtrack_leaves_single_node() {
        assert_eq!(prune_loops(&ids(&[0, 1, 0])), ids(&[0]));
    }

    /// Re-scanning oracle: collapse duplicates, then repeatedly find the
    /// first reappearance and delete from the previous occurrence up to (not
    /// including) it, restarting after every deletion.
    fn oracle_prune(seq: &[NodeId]) -> Vec<NodeId> {
        let mut s: Vec<NodeId> = Vec::new();
        for &x in seq {
            if s.last() != Some(&x) {
                s.push(x);
            }
        }
        'outer: loop {
            let mut seen: BTreeMap<NodeId, usize> = BTreeMap::new();
            for i in 0..s.len() {
                if let Some(&p) = seen.get(&s[i]) {
                    s.drain(p..i);
                    continue 'outer;
                }
                seen.insert(s[i], i);
            }
            return s;
        }
    }

    #[test]
    fn prune_agrees_with_rescanning_oracle_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..1000 {
            let len = rng.gen_range(0..=30);
            let seq: Vec<NodeId> = (0..len).map(|_| NodeId(rng.gen_range(0..8))).collect();
            let got = prune_loops(&seq);
            assert_eq!(got, oracle_prune(&seq), "input {seq:?}");
            // Loop-free.
            let mut uniq = std::collections::BTreeSet::new();
            assert!(got.iter().all(|x| uniq.insert(*x)), "repeat in {got:?}");
            // Idempotent.
            assert_eq!(prune_loops(&got), got);
            // Subsequence of the duplicate-collapsed input.
            let mut merged: Vec<NodeId> = Vec::new();
            for &x in &seq {
                if merged.last() != Some(&x) {
                    merged.push(x);
                }
            }
            let mut it = merged.iter();
            assert!(
                got.iter().all(|g| it.any(|m| m == g)),
                "{got:?} is not a subsequence of {merged:?}"
            );
        }
    }

    fn node_with(id: u32, labels: [SectorLabel; SECTOR_COUNT]) -> TopoNode {
        TopoNode { id: NodeId(id), world_pos: Point::new(0.0, 0.0), sector_vector: SectorVector(labels) }
    }

    #[test]
    fn describe_open_node() {
        let traj = TopoPolarTrajectory {
            nodes: vec![node_with(0, [SectorLabel::Free; SECTOR_COUNT])],
            goal_category: 0,
            source_tag: "t".into(),
        };
        assert_eq!(describe_trajectory(&traj, &["bed".to_string()]), "node 1: open space. goal: bed.");
    }

    #[test]
    fn describe_names_obstacle_sectors_by_clock_direction() {
        let mut labels = [SectorLabel::Free; SECTOR_COUNT];
        labels[0] = SectorLabel::Obstacle;
        labels[1] = SectorLabel::Obstacle;
        labels[2] = SectorLabel::Obstacle;
        let traj = TopoPolarTrajectory {
            nodes: vec![node_with(0, labels)],
            goal_category: 0,
            source_tag: "t".into(),
        };
        let text = describe_trajectory(&traj, &["bed".to_string()]);
        assert_eq!(
            text,
            "node 1: obstacle at 3 o'clock, obstacle at 2 o'clock, obstacle at 1 o'clock. goal: bed."
        );
    }

    #[test]
    fn describe_uses_category_names() {
        let mut labels = [SectorLabel::Free; SECTOR_COUNT];
        labels[3] = SectorLabel::Category(1); // north
        let traj = TopoPolarTrajectory {
            nodes: vec![node_with(0, labels)],
            goal_category: 0,
            source_tag: "t".into(),
        };
        let text = describe_trajectory(&traj, &["bed".to_string(), "chair".to_string()]);
        assert_eq!(text, "node 1: chair at 12 o'clock. goal: bed.");
    }

    /// A map with two rooms joined by corridors in an H shape.
    fn h_map() -> SemanticMap {
        let mut map = SemanticMap::new(61, 41, 0.05, Point::new(0.0, 0.0), vec!["bed".into()]);
        let free = |map: &mut SemanticMap, x0: i32, x1: i32, y0: i32, y1: i32| {
            for y in y0..y1 {
                for x in x0..x1 {
                    map.mark_explored(Cell::new(x, y));
                }
            }
        };
        // Two vertical corridors and a crossbar: junction zones sit 40 cells
        // (2 m) apart, far beyond d_min.
        free(&mut map, 8, 13, 2, 39);
        free(&mut map, 48, 53, 2, 39);
        free(&mut map, 8, 53, 18, 23);
        map
    }

    #[test]
    fn h_corridor_yields_two_suppressed_junctions() {
        let map = h_map();
        let skel = skeletonize(&map.free_mask());
        let picked = suppress_nodes(&detect_candidate_nodes(&skel), 0.5, map.resolution());
        assert_eq!(picked.len(), 2, "one junction per corridor crossing, got {picked:?}");
    }

    #[test]
    fn pipeline_is_deterministic() {
        let map = h_map();
        let poses = vec![Point::new(0.5, 0.2), Point::new(0.5, 1.0), Point::new(2.5, 1.0)];
        let a = build_topo_polar_trajectory(&map, &poses, 0, &TopoConfig::default(), "run").unwrap();
        let b = build_topo_polar_trajectory(&map, &poses, 0, &TopoConfig::default(), "run").unwrap();
        assert_eq!(a, b);
        assert!(!a.nodes.is_empty());
    }

    #[test]
    fn straight_corridor_uses_endpoint_fallback() {
        let mut map = SemanticMap::new(41, 7, 0.05, Point::new(0.0, 0.0), vec!["bed".into()]);
        for y in 2..5 {
            for x in 0..41 {
                map.mark_explored(Cell::new(x, y));
            }
        }
        let poses = vec![Point::new(0.1, 0.15), Point::new(1.9, 0.15)];
        let traj = build_topo_polar_trajectory(&map, &poses, 0, &TopoConfig::default(), "run").unwrap();
        // No junctions exist; endpoints plus midpoint provide the nodes.
        assert!(traj.nodes.len() >= 2, "fallback yields usable nodes, got {}", traj.nodes.len());
    }

    #[test]
    fn empty_map_produces_no_nodes_error() {
        let map = SemanticMap::new(10, 10, 0.05, Point::new(0.0, 0.0), vec!["bed".into()]);
        let err = build_topo_polar_trajectory(&map, &[Point::new(0.1, 0.1)], 0, &TopoConfig::default(), "run");
        assert!(matches!(err, Err(TopoError::NoNodes)));
    }

    #[test]
    fn trajectory_text_round_trip_is_bit_exact() {
        let map = h_map();
        let poses = vec![Point::new(0.5, 0.2), Point::new(0.5, 1.0), Point::new(2.5, 1.0)];
        let traj = build_topo_polar_trajectory(&map, &poses, 0, &TopoConfig::default(), "scene0/walk1").unwrap();
        let text = traj.to_text();
        let back = TopoPolarTrajectory::from_text(&text).unwrap();
        assert_eq!(back, traj);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn trajectory_parse_errors_carry_line_numbers() {
        let bad = "topotraj v1\nsource t\ngoal 0\nnode 0 1.0 2.0 f f f\nend\n";
        let err = TopoPolarTrajectory::from_text(bad).unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn edges_are_exactly_consecutive_pairs() {
        let nodes: Vec<TopoNode> =
            (0..4).map(|i| node_with(i * 3, [SectorLabel::Free; SECTOR_COUNT])).collect();
        let traj = TopoPolarTrajectory { nodes, goal_category: 0, source_tag: "t".into() };
        let edges: Vec<(NodeId, NodeId)> = traj.edges().collect();
        assert_eq!(
            edges,
            vec![(NodeId(0), NodeId(3)), (NodeId(3), NodeId(6)), (NodeId(6), NodeId(9))]
        );
    }
}
