//! The experience store: trajectory chunks organized into groups.
//!
//! Each group keeps a summary graph — the union of its member trajectories'
//! nodes in one shared frame. Insertion aligns a new trajectory against
//! every summary (semantic matching plus RANSAC), merges it into the best
//! valid group or opens a new one, and discards or supersedes redundant
//! members whose node sequences are contained in one another. Retrieval is
//! coarse-to-fine: groups are ranked geometrically, then chunks within the
//! winning groups by embedding cosine.

use crate::embed::{
    embed_trajectory, train_projection, EmbedError, LabeledTrajectory, ProjectionParams,
    TrainConfig, TrainReport, TrajectoryEmbedding,
};
use crate::geom::Point;
use crate::gridmap::{SectorLabel, SectorVector, SECTOR_ANGLE, SECTOR_COUNT};
use crate::matching::{
    estimate_se2_ransac, node_similarity, rotate_sector, semantic_match, MatchError, Se2Transform,
};
use crate::textio::{tokens, LineCursor, TextError};
use crate::topo::{describe_trajectory, NodeId, TopoError, TopoNode, TopoPolarTrajectory};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot insert an empty trajectory")]
    EmptyTrajectory,
    #[error("goal category {0} out of range (store has {1})")]
    GoalOutOfRange(u16, usize),
    #[error("unknown group id {0}")]
    UnknownGroup(u32),
    #[error("store invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Topo(#[from] TopoError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io { path: path.display().to_string(), source }
}

/// Matching and merging thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    /// Distance under which a transformed trajectory node is identified with
    /// an existing summary node, meters.
    pub eps_merge: f64,
    /// Mutual-KNN K used for insertion and coarse retrieval.
    pub knn_k: usize,
    pub ransac_iters: u32,
    /// RANSAC inlier tolerance, meters.
    pub inlier_tol: f64,
    /// Minimum fraction of the smaller node set that inlier correspondences
    /// must cover for an alignment to count as valid. (The raw pair-level
    /// inlier ratio would punish dense mutual-KNN output: a perfect
    /// self-match of n nodes produces up to 3n pairs of which only n can be
    /// inliers.)
    pub min_inlier_ratio: f64,
    /// Base seed for the per-group RANSAC draws.
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            eps_merge: 0.5,
            knn_k: 3,
            ransac_iters: 256,
            inlier_tol: 0.5,
            min_inlier_ratio: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkId(pub u32);

impl std::fmt::Display for ChunkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(pub u32);

impl std::fmt::Display for GroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One stored trajectory with its rendered description and fine-index
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub id: ChunkId,
    pub trajectory: TopoPolarTrajectory,
    pub description: String,
    pub embedding: TrajectoryEmbedding,
}

/// Union of member trajectories in the group frame. Summary node ids equal
/// their index and are never removed, so member records stay valid as the
/// summary grows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryGraph {
    pub nodes: Vec<TopoNode>,
    /// Undirected, stored with the smaller id first.
    pub edges: BTreeSet<(u32, u32)>,
}

impl SummaryGraph {
    fn add_edge(&mut self, a: u32, b: u32) {
        if a != b {
            self.edges.insert((a.min(b), a.max(b)));
        }
    }
}

/// A member chunk's registration: the transform that carried it into the
/// group frame and its node sequence resolved to summary node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub chunk: ChunkId,
    pub transform: Se2Transform,
    pub resolved: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: GroupId,
    pub summary: SummaryGraph,
    pub members: Vec<GroupMember>,
}

impl Group {
    pub fn chunk_ids(&self) -> impl Iterator<Item = ChunkId> + '_ {
        self.members.iter().map(|m| m.chunk)
    }

    /// Maps each trajectory node to the id of a summary node strictly within
    /// `eps` after applying `transform` (nearest wins, ties to the lowest
    /// id). Nodes matching nothing get unique negative sentinels so that
    /// subsequence tests never pair them with anything.
    pub fn resolve_nodes(&self, nodes: &[TopoNode], transform: &Se2Transform, eps: f64) -> Vec<i64> {
        let mut next_sentinel = -1i64;
        nodes
            .iter()
            .map(|n| {
                let p = transform.apply(n.world_pos);
                let mut best: Option<(f64, usize)> = None;
                for (i, s) in self.summary.nodes.iter().enumerate() {
                    let d = p.distance(&s.world_pos);
                    if d < eps && best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
                match best {
                    Some((_, i)) => i as i64,
                    None => {
                        let s = next_sentinel;
                        next_sentinel -= 1;
                        s
                    }
                }
            })
            .collect()
    }

    /// Folds a trajectory into the summary: nodes within `eps` of an
    /// existing summary node are identified with it (the summary node's
    /// sector vector wins), the rest are appended with their sector vectors
    /// rotated into the group frame; consecutive-pair edges are added if
    /// absent. Returns the fully resolved node sequence. Merging the same
    /// trajectory twice is a no-op the second time.
    pub fn merge_trajectory(
        &mut self,
        nodes: &[TopoNode],
        transform: &Se2Transform,
        eps: f64,
    ) -> Vec<i64> {
        let sector_shift = (transform.rotation / SECTOR_ANGLE).round() as i32;
        let mut resolved = Vec::with_capacity(nodes.len());
        for (n, r) in nodes.iter().zip(self.resolve_nodes(nodes, transform, eps)) {
            if r >= 0 {
                resolved.push(r);
            } else {
                let id = self.summary.nodes.len() as u32;
                self.summary.nodes.push(TopoNode {
                    id: NodeId(id),
                    world_pos: transform.apply(n.world_pos),
                    sector_vector: rotate_sector(&n.sector_vector, sector_shift),
                });
                resolved.push(id as i64);
            }
        }
        for w in resolved.windows(2) {
            self.summary.add_edge(w[0] as u32, w[1] as u32);
        }
        resolved
    }

    fn sector_vectors(&self) -> Vec<SectorVector> {
        self.summary.nodes.iter().map(|n| n.sector_vector).collect()
    }

    fn positions(&self) -> Vec<Point> {
        self.summary.nodes.iter().map(|n| n.world_pos).collect()
    }
}

/// What happened to an inserted trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    /// No group aligned; the trajectory seeded a new group's summary.
    NewGroup { group: GroupId, chunk: ChunkId },
    /// Valid alignment; nodes and edges folded into the group summary.
    MergedInto { group: GroupId, chunk: ChunkId, transform: Se2Transform },
    /// An existing same-goal member already contains this node sequence.
    DiscardedRedundant { group: GroupId, superseding: ChunkId },
    /// This trajectory contains one or more members, which were removed.
    SupersededExisting { group: GroupId, chunk: ChunkId, removed: Vec<ChunkId>, transform: Se2Transform },
}

/// Redundancy relation between a resolved query sequence and a group's
/// same-goal members.
#[derive(Debug, Clone, PartialEq)]
pub enum RedundancyVerdict {
    /// The query's sequence is contained in this member's; drop the query.
    Redundant { superseding: ChunkId },
    /// These members' sequences are contained in the query's.
    Supersedes { members: Vec<ChunkId> },
    Independent,
}

/// `small` appears in `big` in order (not necessarily contiguously) — the
/// containment relation behind redundancy verdicts.
pub fn is_subsequence(small: &[i64], big: &[i64]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

/// Result of aligning a trajectory against one group summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub transform: Se2Transform,
    /// inlier_ratio × mean inlier pair similarity; 0 when nothing matches.
    pub score: f64,
    pub inliers: usize,
    /// Whether the alignment clears the merge thresholds: inlier
    /// correspondences must cover at least `min_inlier_ratio` of the smaller
    /// node set and number at least four (or the smaller node count when
    /// that is below four).
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct TrajRagStore {
    pub config: StoreConfig,
    categories: Vec<String>,
    params: ProjectionParams,
    groups: Vec<Group>,
    chunks: BTreeMap<ChunkId, Chunk>,
    next_chunk: u32,
    next_group: u32,
}

impl TrajRagStore {
    pub fn new(
        categories: Vec<String>,
        params: ProjectionParams,
        config: StoreConfig,
    ) -> Result<Self, StoreError> {
        if params.n_categories != categories.len() {
            return Err(StoreError::Invariant(format!(
                "projection built for {} categories, store has {}",
                params.n_categories,
                categories.len()
            )));
        }
        Ok(TrajRagStore {
            config,
            categories,
            params,
            groups: Vec::new(),
            chunks: BTreeMap::new(),
            next_chunk: 0,
            next_group: 0,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn params(&self) -> &ProjectionParams {
        &self.params
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> Result<&Group, StoreError> {
        self.groups.iter().find(|g| g.id == id).ok_or(StoreError::UnknownGroup(id.0))
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values()
    }

    pub fn chunk(&self, id: ChunkId) -> Option<&Chunk> {
        self.chunks.get(&id)
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    /// Aligns a trajectory's nodes against one group. Two or more
    /// correspondences go through RANSAC; a single correspondence falls back
    /// to the rotation recovered by sector alignment plus the translation
    /// between the paired nodes, which can only be a valid merge when one
    /// side is a single-node graph.
    pub fn align_to_group(
        &self,
        group: &Group,
        sectors: &[SectorVector],
        positions: &[Point],
    ) -> Result<Alignment, StoreError> {
        let summary_sectors = group.sector_vectors();
        let summary_positions = group.positions();
        let corr = semantic_match(sectors, &summary_sectors, self.config.knn_k);
        let min_inliers = 4.min(sectors.len().min(summary_sectors.len()));
        if corr.is_empty() {
            return Ok(Alignment {
                transform: Se2Transform::identity(),
                score: 0.0,
                inliers: 0,
                valid: false,
            });
        }
        if corr.len() == 1 {
            let (qi, tj, s) = corr.pairs[0];
            let k = node_similarity(&sectors[qi], &summary_sectors[tj]).1;
            let rot = k as f64 * SECTOR_ANGLE;
            let rotated = Se2Transform::new(rot, Point::new(0.0, 0.0)).apply(positions[qi]);
            let transform = Se2Transform::new(
                rot,
                Point::new(summary_positions[tj].x - rotated.x, summary_positions[tj].y - rotated.y),
            );
            return Ok(Alignment { transform, score: s, inliers: 1, valid: min_inliers <= 1 });
        }
        let seed = self.config.seed.wrapping_add(group.id.0 as u64);
        let result = estimate_se2_ransac(
            &corr,
            positions,
            &summary_positions,
            self.config.ransac_iters,
            self.config.inlier_tol,
            seed,
        )?;
        let mean_sim = if result.inliers.is_empty() {
            0.0
        } else {
            result.inliers.pairs.iter().map(|p| p.2).sum::<f64>() / result.inliers.len() as f64
        };
        let covered: BTreeSet<usize> = result.inliers.pairs.iter().map(|p| p.0).collect();
        let coverage =
            covered.len() as f64 / sectors.len().min(summary_sectors.len()) as f64;
        Ok(Alignment {
            transform: result.transform,
            score: result.inlier_ratio * mean_sim,
            inliers: result.inliers.len(),
            valid: coverage >= self.config.min_inlier_ratio
                && result.inliers.len() >= min_inliers,
        })
    }

    /// Compares a resolved query sequence against a group's members with the
    /// same goal. Containment in a member discards the query; members
    /// contained in the query are superseded. Discarding wins when both
    /// hold (equal sequences).
    pub fn check_redundancy(&self, group: &Group, resolved: &[i64], goal: u16) -> RedundancyVerdict {
        let same_goal: Vec<&GroupMember> = group
            .members
            .iter()
            .filter(|m| {
                self.chunks.get(&m.chunk).map_or(false, |c| c.trajectory.goal_category == goal)
            })
            .collect();
        for m in &same_goal {
            if is_subsequence(resolved, &m.resolved) {
                return RedundancyVerdict::Redundant { superseding: m.chunk };
            }
        }
        let superseded: Vec<ChunkId> = same_goal
            .iter()
            .filter(|m| is_subsequence(&m.resolved, resolved))
            .map(|m| m.chunk)
            .collect();
        if superseded.is_empty() {
            RedundancyVerdict::Independent
        } else {
            RedundancyVerdict::Supersedes { members: superseded }
        }
    }

    fn make_chunk(&mut self, traj: &TopoPolarTrajectory) -> Result<Chunk, StoreError> {
        let id = ChunkId(self.next_chunk);
        self.next_chunk += 1;
        Ok(Chunk {
            id,
            trajectory: traj.clone(),
            description: describe_trajectory(traj, &self.categories),
            embedding: embed_trajectory(traj, &self.params)?,
        })
    }

    /// Inserts a trajectory: aligns it against every group summary, merges
    /// into the best valid one (handling redundancy), or seeds a new group.
    pub fn insert_trajectory(&mut self, traj: &TopoPolarTrajectory) -> Result<InsertOutcome, StoreError> {
        if traj.nodes.is_empty() {
            return Err(StoreError::EmptyTrajectory);
        }
        traj.validate()?;
        if traj.goal_category as usize >= self.categories.len() {
            return Err(StoreError::GoalOutOfRange(traj.goal_category, self.categories.len()));
        }
        let sectors = traj.sector_vectors();
        let positions = traj.positions();
        let mut best: Option<(usize, Alignment)> = None;
        for (gi, group) in self.groups.iter().enumerate() {
            let a = self.align_to_group(group, &sectors, &positions)?;
            if a.valid && best.as_ref().map_or(true, |(_, b)| a.score > b.score) {
                best = Some((gi, a));
            }
        }
        let Some((gi, alignment)) = best else {
            // No summary aligned: this trajectory becomes a group of its own.
            let chunk = self.make_chunk(traj)?;
            let group_id = GroupId(self.next_group);
            self.next_group += 1;
            let mut summary = SummaryGraph::default();
            for (i, n) in traj.nodes.iter().enumerate() {
                summary.nodes.push(TopoNode {
                    id: NodeId(i as u32),
                    world_pos: n.world_pos,
                    sector_vector: n.sector_vector,
                });
            }
            let resolved: Vec<i64> = (0..traj.nodes.len() as i64).collect();
            for w in resolved.windows(2) {
                summary.add_edge(w[0] as u32, w[1] as u32);
            }
            let member =
                GroupMember { chunk: chunk.id, transform: Se2Transform::identity(), resolved };
            let chunk_id = chunk.id;
            self.chunks.insert(chunk.id, chunk);
            self.groups.push(Group { id: group_id, summary, members: vec![member] });
            return Ok(InsertOutcome::NewGroup { group: group_id, chunk: chunk_id });
        };
        let group_id = self.groups[gi].id;
        let resolved = self.groups[gi].resolve_nodes(&traj.nodes, &alignment.transform, self.config.eps_merge);
        match self.check_redundancy(&self.groups[gi], &resolved, traj.goal_category) {
            RedundancyVerdict::Redundant { superseding } => {
                Ok(InsertOutcome::DiscardedRedundant { group: group_id, superseding })
            }
            verdict => {
                let removed = match verdict {
                    RedundancyVerdict::Supersedes { members } => members,
                    _ => Vec::new(),
                };
                let chunk = self.make_chunk(traj)?;
                let chunk_id = chunk.id;
                self.chunks.insert(chunk.id, chunk);
                let final_resolved = self.groups[gi].merge_trajectory(
                    &traj.nodes,
                    &alignment.transform,
                    self.config.eps_merge,
                );
                self.groups[gi].members.push(GroupMember {
                    chunk: chunk_id,
                    transform: alignment.transform,
                    resolved: final_resolved,
                });
                for dead in &removed {
                    self.chunks.remove(dead);
                    self.groups[gi].members.retain(|m| m.chunk != *dead);
                }
                if removed.is_empty() {
                    Ok(InsertOutcome::MergedInto {
                        group: group_id,
                        chunk: chunk_id,
                        transform: alignment.transform,
                    })
                } else {
                    Ok(InsertOutcome::SupersededExisting {
                        group: group_id,
                        chunk: chunk_id,
                        removed,
                        transform: alignment.transform,
                    })
                }
            }
        }
    }

    /// Ranks groups by alignment score against the query trajectory.
    /// Groups that match nothing are kept as a zero-scored tail; ties break
    /// toward the lower group id. Returns at most `top_m` entries.
    pub fn coarse_retrieve(
        &self,
        query: &TopoPolarTrajectory,
        top_m: usize,
    ) -> Result<Vec<(GroupId, f64)>, StoreError> {
        let sectors = query.sector_vectors();
        let positions = query.positions();
        let mut scored = Vec::with_capacity(self.groups.len());
        for group in &self.groups {
            let a = self.align_to_group(group, &sectors, &positions)?;
            // Groups that fail the merge-quality thresholds have no usable
            // geometric relation to the query; surfacing them would hand the
            // fine stage an arbitrary chunk pool.
            if a.valid && a.score > 0.0 {
                scored.push((group.id, a.score));
            }
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(top_m);
        Ok(scored)
    }

    /// Ranks chunks inside the given groups by embedding cosine against the
    /// query embedding; ties break toward the lower chunk id.
    pub fn fine_retrieve(
        &self,
        group_ids: &[GroupId],
        query: &TrajectoryEmbedding,
        top_k: usize,
    ) -> Result<Vec<(ChunkId, f64)>, StoreError> {
        let mut scored = Vec::new();
        for gid in group_ids {
            let group = self.group(*gid)?;
            for m in &group.members {
                let chunk = self
                    .chunks
                    .get(&m.chunk)
                    .ok_or_else(|| StoreError::Invariant(format!("member chunk {} missing", m.chunk)))?;
                scored.push((chunk.id, query.dot(&chunk.embedding)));
            }
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(top_k);
        Ok(scored)
    }

    /// Retrains the fine-index projection on the stored chunks, using group
    /// membership as the contrastive labels, then re-embeds every chunk.
    pub fn retrain_projection(&mut self, cfg: &TrainConfig) -> Result<TrainReport, StoreError> {
        let mut dataset = Vec::new();
        for group in &self.groups {
            for m in &group.members {
                let chunk = &self.chunks[&m.chunk];
                dataset.push(LabeledTrajectory {
                    traj: chunk.trajectory.clone(),
                    group: group.id.0 as usize,
                });
            }
        }
        let report = train_projection(&dataset, self.categories.len(), cfg)?;
        self.params = report.params.clone();
        for chunk in self.chunks.values_mut() {
            chunk.embedding = embed_trajectory(&chunk.trajectory, &self.params)?;
        }
        Ok(report)
    }

    /// Structural invariants: member chunk ids partition the chunk set,
    /// summary nodes are pairwise at least `eps_merge` apart, members'
    /// transformed nodes land on summary nodes, descriptions and embedding
    /// norms are consistent.
    pub fn validate(&self) -> Result<(), StoreError> {
        let mut seen = BTreeSet::new();
        for group in &self.groups {
            for (i, a) in group.summary.nodes.iter().enumerate() {
                if a.id != NodeId(i as u32) {
                    return Err(StoreError::Invariant(format!(
                        "group {}: summary node {} has id {}",
                        group.id, i, a.id
                    )));
                }
                for b in &group.summary.nodes[i + 1..] {
                    if a.world_pos.distance(&b.world_pos) < self.config.eps_merge {
                        return Err(StoreError::Invariant(format!(
                            "group {}: summary nodes {} and {} closer than eps_merge",
                            group.id, a.id, b.id
                        )));
                    }
                }
            }
            for (a, b) in &group.summary.edges {
                if *a >= group.summary.nodes.len() as u32 || *b >= group.summary.nodes.len() as u32 {
                    return Err(StoreError::Invariant(format!(
                        "group {}: edge ({a}, {b}) past node count",
                        group.id
                    )));
                }
            }
            for m in &group.members {
                if !seen.insert(m.chunk) {
                    return Err(StoreError::Invariant(format!("chunk {} in two groups", m.chunk)));
                }
                let chunk = self.chunks.get(&m.chunk).ok_or_else(|| {
                    StoreError::Invariant(format!("member chunk {} not stored", m.chunk))
                })?;
                if m.resolved.len() != chunk.trajectory.nodes.len() {
                    return Err(StoreError::Invariant(format!(
                        "chunk {}: resolved length mismatch",
                        m.chunk
                    )));
                }
                for (n, r) in chunk.trajectory.nodes.iter().zip(&m.resolved) {
                    let p = m.transform.apply(n.world_pos);
                    let ok = usize::try_from(*r)
                        .ok()
                        .and_then(|r| group.summary.nodes.get(r))
                        .map_or(false, |s| p.distance(&s.world_pos) <= self.config.eps_merge);
                    if !ok {
                        return Err(StoreError::Invariant(format!(
                            "chunk {}: node {} does not land on summary node {r}",
                            m.chunk, n.id
                        )));
                    }
                }
            }
        }
        let stored: BTreeSet<ChunkId> = self.chunks.keys().copied().collect();
        if stored != seen {
            return Err(StoreError::Invariant("chunk set differs from group membership".into()));
        }
        for chunk in self.chunks.values() {
            if (chunk.embedding.norm() - 1.0).abs() > 1e-6 {
                return Err(StoreError::Invariant(format!("chunk {}: embedding not unit norm", chunk.id)));
            }
            if chunk.description != describe_trajectory(&chunk.trajectory, &self.categories) {
                return Err(StoreError::Invariant(format!(
                    "chunk {}: description out of date",
                    chunk.id
                )));
            }
        }
        Ok(())
    }

    // ========================================================================
    // Persistence
    // ========================================================================

    /// Writes the store as a directory: `manifest`, `groups/<id>`,
    /// `chunks/<id>`. Existing `groups/` and `chunks/` subdirectories are
    /// replaced wholesale so stale records cannot linger.
    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for sub in ["groups", "chunks"] {
            let p = dir.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(|e| io_err(&p, e))?;
            }
            std::fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        let manifest = dir.join("manifest");
        std::fs::write(&manifest, self.manifest_text()).map_err(|e| io_err(&manifest, e))?;
        for group in &self.groups {
            let p = dir.join("groups").join(group.id.to_string());
            std::fs::write(&p, group_text(group)).map_err(|e| io_err(&p, e))?;
        }
        for chunk in self.chunks.values() {
            let p = dir.join("chunks").join(chunk.id.to_string());
            std::fs::write(&p, chunk_text(chunk)).map_err(|e| io_err(&p, e))?;
        }
        Ok(())
    }

    fn manifest_text(&self) -> String {
        let c = &self.config;
        let mut out = String::from("trajrag-store v1\n");
        out.push_str(&format!(
            "config {} {} {} {} {} {}\n",
            c.eps_merge, c.knn_k, c.ransac_iters, c.inlier_tol, c.min_inlier_ratio, c.seed
        ));
        out.push_str(&format!("categories {}\n", self.categories.len()));
        for name in &self.categories {
            out.push_str(name);
            out.push('\n');
        }
        out.push_str(&self.params.to_text_block());
        let group_ids: Vec<String> = self.groups.iter().map(|g| g.id.to_string()).collect();
        out.push_str(&format!("groups{}{}\n", if group_ids.is_empty() { "" } else { " " }, group_ids.join(" ")));
        let chunk_ids: Vec<String> = self.chunks.keys().map(|c| c.to_string()).collect();
        out.push_str(&format!("chunks{}{}\n", if chunk_ids.is_empty() { "" } else { " " }, chunk_ids.join(" ")));
        out.push_str(&format!("next {} {}\n", self.next_group, self.next_chunk));
        out.push_str("end\n");
        out
    }

    /// Reads a store directory back. Any malformed file fails the whole
    /// load with a line-numbered error; no partial store is returned.
    pub fn load(dir: &Path) -> Result<TrajRagStore, StoreError> {
        let manifest_path = dir.join("manifest");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let mut cur = LineCursor::new(&text);
        cur.expect("trajrag-store v1")?;
        let cfg_line = cur.expect_key("config")?;
        let toks = tokens(cfg_line);
        if toks.len() != 6 {
            return Err(TextError::at(cur.line_no(), "config expects 6 values").into());
        }
        let config = StoreConfig {
            eps_merge: cur.parse_one(toks[0], "eps_merge")?,
            knn_k: cur.parse_one(toks[1], "knn_k")?,
            ransac_iters: cur.parse_one(toks[2], "ransac_iters")?,
            inlier_tol: cur.parse_one(toks[3], "inlier_tol")?,
            min_inlier_ratio: cur.parse_one(toks[4], "min_inlier_ratio")?,
            seed: cur.parse_one(toks[5], "seed")?,
        };
        let n_cat: usize = {
            let s = cur.expect_key("categories")?;
            cur.parse_one(s.trim(), "category count")?
        };
        let mut categories = Vec::with_capacity(n_cat);
        for _ in 0..n_cat {
            categories.push(cur.next()?.to_string());
        }
        let params = ProjectionParams::parse_block(&mut cur)?;
        let parse_ids = |cur: &mut LineCursor, key: &str| -> Result<Vec<u32>, StoreError> {
            let line = cur.expect_key(key)?;
            tokens(line)
                .iter()
                .map(|t| cur.parse_one::<u32>(t, "id").map_err(StoreError::from))
                .collect()
        };
        let group_ids = parse_ids(&mut cur, "groups")?;
        let chunk_ids = parse_ids(&mut cur, "chunks")?;
        let next_line = cur.expect_key("next")?;
        let toks = tokens(next_line);
        if toks.len() != 2 {
            return Err(TextError::at(cur.line_no(), "next expects group and chunk counters").into());
        }
        let next_group: u32 = cur.parse_one(toks[0], "next group id")?;
        let next_chunk: u32 = cur.parse_one(toks[1], "next chunk id")?;
        cur.expect("end")?;
        let mut store = TrajRagStore::new(categories, params, config)?;
        store.next_group = next_group;
        store.next_chunk = next_chunk;
        for id in chunk_ids {
            let p = dir.join("chunks").join(id.to_string());
            let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
            let chunk = parse_chunk(&text)?;
            if chunk.id != ChunkId(id) {
                return Err(StoreError::Invariant(format!(
                    "chunk file {id} contains chunk {}",
                    chunk.id
                )));
            }
            store.chunks.insert(chunk.id, chunk);
        }
        for id in group_ids {
            let p = dir.join("groups").join(id.to_string());
            let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
            let group = parse_group(&text)?;
            if group.id != GroupId(id) {
                return Err(StoreError::Invariant(format!(
                    "group file {id} contains group {}",
                    group.id
                )));
            }
            store.groups.push(group);
        }
        store.validate()?;
        Ok(store)
    }
}

fn group_text(group: &Group) -> String {
    let mut out = String::from("group v1\n");
    out.push_str(&format!("id {}\n", group.id));
    out.push_str(&format!("nodes {}\n", group.summary.nodes.len()));
    for n in &group.summary.nodes {
        out.push_str(&format!(
            "node {} {} {} {}\n",
            n.id, n.world_pos.x, n.world_pos.y,
            n.sector_vector.tokens()
        ));
    }
    out.push_str(&format!("edges {}\n", group.summary.edges.len()));
    for (a, b) in &group.summary.edges {
        out.push_str(&format!("edge {a} {b}\n"));
    }
    out.push_str(&format!("members {}\n", group.members.len()));
    for m in &group.members {
        let resolved: Vec<String> = m.resolved.iter().map(|r| r.to_string()).collect();
        out.push_str(&format!(
            "member {} {} {} {} {}\n",
            m.chunk,
            m.transform.rotation,
            m.transform.translation.x,
            m.transform.translation.y,
            resolved.join(" ")
        ));
    }
    out.push_str("end\n");
    out
}

pub(crate) fn parse_group(text: &str) -> Result<Group, StoreError> {
    let mut cur = LineCursor::new(text);
    cur.expect("group v1")?;
    let id: u32 = {
        let s = cur.expect_key("id")?;
        cur.parse_one(s.trim(), "group id")?
    };
    let n_nodes: usize = {
        let s = cur.expect_key("nodes")?;
        cur.parse_one(s.trim(), "node count")?
    };
    let mut summary = SummaryGraph::default();
    for _ in 0..n_nodes {
        let line = cur.expect_key("node")?;
        let toks = tokens(line);
        if toks.len() != 3 + SECTOR_COUNT {
            return Err(TextError::at(cur.line_no(), "node expects id, x, y and 12 labels").into());
        }
        let nid: u32 = cur.parse_one(toks[0], "node id")?;
        let x: f64 = cur.parse_one(toks[1], "node x")?;
        let y: f64 = cur.parse_one(toks[2], "node y")?;
        let mut labels = [SectorLabel::Free; SECTOR_COUNT];
        for (k, slot) in labels.iter_mut().enumerate() {
            *slot = SectorLabel::from_token(toks[3 + k])
                .ok_or_else(|| TextError::at(cur.line_no(), format!("invalid label `{}`", toks[3 + k])))?;
        }
        summary.nodes.push(TopoNode {
            id: NodeId(nid),
            world_pos: Point::new(x, y),
            sector_vector: SectorVector(labels),
        });
    }
    let n_edges: usize = {
        let s = cur.expect_key("edges")?;
        cur.parse_one(s.trim(), "edge count")?
    };
    for _ in 0..n_edges {
        let line = cur.expect_key("edge")?;
        let toks = tokens(line);
        if toks.len() != 2 {
            return Err(TextError::at(cur.line_no(), "edge expects two node ids").into());
        }
        let a: u32 = cur.parse_one(toks[0], "edge endpoint")?;
        let b: u32 = cur.parse_one(toks[1], "edge endpoint")?;
        summary.edges.insert((a.min(b), a.max(b)));
    }
    let n_members: usize = {
        let s = cur.expect_key("members")?;
        cur.parse_one(s.trim(), "member count")?
    };
    let mut members = Vec::with_capacity(n_members);
    for _ in 0..n_members {
        let line = cur.expect_key("member")?;
        let toks = tokens(line);
        if toks.len() < 4 {
            return Err(TextError::at(cur.line_no(), "member expects chunk, transform, resolved ids").into());
        }
        let chunk: u32 = cur.parse_one(toks[0], "member chunk")?;
        let rot: f64 = cur.parse_one(toks[1], "member rotation")?;
        let tx: f64 = cur.parse_one(toks[2], "member tx")?;
        let ty: f64 = cur.parse_one(toks[3], "member ty")?;
        let resolved: Vec<i64> = toks[4..]
            .iter()
            .map(|t| cur.parse_one::<i64>(t, "resolved id"))
            .collect::<Result<_, _>>()?;
        members.push(GroupMember {
            chunk: ChunkId(chunk),
            transform: Se2Transform { rotation: rot, translation: Point::new(tx, ty) },
            resolved,
        });
    }
    cur.expect("end")?;
    Ok(Group { id: GroupId(id), summary, members })
}

fn chunk_text(chunk: &Chunk) -> String {
    let mut out = String::from("chunk v1\n");
    out.push_str(&format!("id {}\n", chunk.id));
    out.push_str(&format!("desc {}\n", chunk.description));
    let emb: Vec<String> = chunk.embedding.0.iter().map(|x| x.to_string()).collect();
    out.push_str(&format!("embedding {} {}\n", emb.len(), emb.join(" ")));
    out.push_str(&chunk.trajectory.to_text());
    out.push_str("end\n");
    out
}

fn parse_chunk(text: &str) -> Result<Chunk, StoreError> {
    let mut cur = LineCursor::new(text);
    cur.expect("chunk v1")?;
    let id: u32 = {
        let s = cur.expect_key("id")?;
        cur.parse_one(s.trim(), "chunk id")?
    };
    let description = cur.expect_key("desc")?.to_string();
    let emb_line = cur.expect_key("embedding")?;
    let toks = tokens(emb_line);
    if toks.is_empty() {
        return Err(TextError::at(cur.line_no(), "embedding expects a length and values").into());
    }
    let dim: usize = cur.parse_one(toks[0], "embedding length")?;
    if toks.len() != dim + 1 {
        return Err(TextError::at(
            cur.line_no(),
            format!("embedding expects {} values, found {}", dim, toks.len() - 1),
        )
        .into());
    }
    let values: Vec<f64> = toks[1..]
        .iter()
        .map(|t| cur.parse_one::<f64>(t, "embedding value"))
        .collect::<Result<_, _>>()?;
    let trajectory = TopoPolarTrajectory::parse_block(&mut cur)?;
    cur.expect("end")?;
    Ok(Chunk {
        id: ChunkId(id),
        trajectory,
        description,
        embedding: TrajectoryEmbedding(values),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const N_CAT: usize = 3;

    fn cats() -> Vec<String> {
        vec!["bed".into(), "chair".into(), "table".into()]
    }

    fn test_store() -> TrajRagStore {
        TrajRagStore::new(cats(), ProjectionParams::random(N_CAT, 8, 42), StoreConfig::default())
            .unwrap()
    }

    /// A scene node vocabulary: distinctive sector vectors anchored at fixed
    /// positions, spaced well beyond eps_merge.
    fn scene_node(i: usize) -> TopoNode {
        let mut labels = [SectorLabel::Free; SECTOR_COUNT];
        labels[0] = SectorLabel::Category((i % N_CAT) as u16);
        labels[(1 + i) % SECTOR_COUNT] = SectorLabel::Category(((i + 1) % N_CAT) as u16);
        labels[(5 + 2 * i) % SECTOR_COUNT] = SectorLabel::Obstacle;
        TopoNode {
            id: NodeId(i as u32),
            world_pos: Point::new((i % 3) as f64 * 1.2, (i / 3) as f64 * 1.2),
            sector_vector: SectorVector(labels),
        }
    }

    /// Walk over the scene vocabulary, re-expressed in a frame given by
    /// `offset` (sector-aligned so sector vectors rotate consistently).
    fn walk(node_ids: &[usize], goal: u16, offset_sectors: i32, offset_t: Point) -> TopoPolarTrajectory {
        // The trajectory frame maps into the scene frame by `scene_from_walk`;
        // walk coordinates are therefore the inverse image of the scene.
        let scene_from_walk =
            Se2Transform::new(offset_sectors as f64 * SECTOR_ANGLE, offset_t);
        let walk_from_scene = scene_from_walk.inverse();
        let nodes = node_ids
            .iter()
            .enumerate()
            .map(|(order, &i)| {
                let scene = scene_node(i);
                TopoNode {
                    id: NodeId(order as u32),
                    world_pos: walk_from_scene.apply(scene.world_pos),
                    sector_vector: rotate_sector(&scene.sector_vector, -offset_sectors),
                }
            })
            .collect();
        TopoPolarTrajectory { nodes, goal_category: goal, source_tag: format!("walk{node_ids:?}") }
    }

    #[test]
    fn first_insert_creates_a_group() {
        let mut store = test_store();
        let out = store.insert_trajectory(&walk(&[0, 1, 2, 3], 0, 0, Point::new(0.0, 0.0))).unwrap();
        assert!(matches!(out, InsertOutcome::NewGroup { group: GroupId(0), .. }));
        assert_eq!(store.chunk_count(), 1);
        store.validate().unwrap();
    }

    #[test]
    fn reinserting_the_same_trajectory_is_discarded() {
        let mut store = test_store();
        let t = walk(&[0, 1, 2, 3], 0, 0, Point::new(0.0, 0.0));
        store.insert_trajectory(&t).unwrap();
        let out = store.insert_trajectory(&t).unwrap();
        assert!(
            matches!(out, InsertOutcome::DiscardedRedundant { superseding: ChunkId(0), .. }),
            "{out:?}"
        );
        assert_eq!(store.chunk_count(), 1);
        store.validate().unwrap();
    }

    #[test]
    fn planted_offset_walk_merges_with_recovered_transform() {
        let mut store = test_store();
        store.insert_trajectory(&walk(&[0, 1, 2, 3], 0, 0, Point::new(0.0, 0.0))).unwrap();
        // Same scene walked from a frame rotated two sectors and shifted;
        // the different goal keeps both chunks instead of superseding.
        let t2 = walk(&[0, 1, 2, 3, 4], 1, 2, Point::new(1.0, -0.5));
        let out = store.insert_trajectory(&t2).unwrap();
        let InsertOutcome::MergedInto { group, transform, .. } = out else {
            panic!("expected merge, got {out:?}");
        };
        assert_eq!(group, GroupId(0));
        assert!((transform.rotation - 2.0 * SECTOR_ANGLE).abs() < 1e-6);
        assert!(transform.translation.distance(&Point::new(1.0, -0.5)) < 1e-6);
        // Four shared nodes identified, one new node appended.
        assert_eq!(store.groups()[0].summary.nodes.len(), 5);
        store.validate().unwrap();
    }

    #[test]
    fn extending_walk_supersedes_contained_member() {
        let mut store = test_store();
        store.insert_trajectory(&walk(&[0, 1, 2, 3], 0, 0, Point::new(0.0, 0.0))).unwrap();
        let longer = walk(&[0, 1, 2, 3, 4], 0, 0, Point::new(0.0, 0.0));
        let out = store.insert_trajectory(&longer).unwrap();
        let InsertOutcome::SupersededExisting { removed, .. } = out else {
            panic!("expected supersede, got {out:?}");
        };
        assert_eq!(removed, vec![ChunkId(0)]);
        assert_eq!(store.chunk_count(), 1);
        store.validate().unwrap();
    }

    #[test]
    fn shorter_contained_walk_is_discarded() {
        let mut store = test_store();
        store.insert_trajectory(&walk(&[0, 1, 2, 3, 4], 0, 0, Point::new(0.0, 0.0))).unwrap();
        let out = store.insert_trajectory(&walk(&[1, 2, 3, 4], 0, 0, Point::new(0.0, 0.0))).unwrap();
        assert!(matches!(out, InsertOutcome::DiscardedRedundant { .. }), "{out:?}");
        assert_eq!(store.chunk_count(), 1);
    }

    #[test]
    fn different_goal_is_never_redundant() {
        let mut store = test_store();
        store.insert_trajectory(&walk(&[0, 1, 2, 3], 0, 0, Point::new(0.0, 0.0))).unwrap();
        let out = store.insert_trajectory(&walk(&[0, 1, 2, 3], 1, 0, Point::new(0.0, 0.0))).unwrap();
        assert!(matches!(out, InsertOutcome::MergedInto { .. }), "{out:?}");
        assert_eq!(store.chunk_count(), 2);
        // Same nodes: the summary did not grow.
        assert_eq!(store.groups()[0].summary.nodes.len(), 4);
        store.validate().unwrap();
    }

    #[test]
    fn order_violating_sequence_is_not_redundant() {
        let mut store = test_store();
        store.insert_trajectory(&walk(&[0, 1, 2], 0, 0, Point::new(0.0, 0.0))).unwrap();
        // Same nodes, different visit order: [0, 2, 1] is not a subsequence
        // of [0, 1, 2] and vice versa.
        let out = store.insert_trajectory(&walk(&[0, 2, 1], 0, 0, Point::new(0.0, 0.0))).unwrap();
        assert!(matches!(out, InsertOutcome::MergedInto { .. }), "{out:?}");
        assert_eq!(store.chunk_count(), 2);
    }

    #[test]
    fn subsequence_oracle_agreement() {
        // Brute-force longest-common-subsequence containment oracle.
        fn lcs(a: &[i64], b: &[i64]) -> usize {
            let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
            for i in 0..a.len() {
                for j in 0..b.len() {
                    dp[i + 1][j + 1] = if a[i] == b[j] {
                        dp[i][j] + 1
                    } else {
                        dp[i][j + 1].max(dp[i + 1][j])
                    };
                }
            }
            dp[a.len()][b.len()]
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let la = rng.gen_range(0..=12);
            let lb = rng.gen_range(0..=12);
            let a: Vec<i64> = (0..la).map(|_| rng.gen_range(0..6)).collect();
            let b: Vec<i64> = (0..lb).map(|_| rng.gen_range(0..6)).collect();
            assert_eq!(is_subsequence(&a, &b), lcs(&a, &b) == a.len(), "{a:?} in {b:?}");
        }
    }

    #[test]
    fn merge_is_idempotent() {
        let mut store = test_store();
        let t = walk(&[0, 1, 2, 3], 0, 0, Point::new(0.0, 0.0));
        store.insert_trajectory(&t).unwrap();
        let mut group = store.groups()[0].clone();
        let before = group.clone();
        let id = Se2Transform::identity();
        let r1 = group.merge_trajectory(&t.nodes, &id, 0.5);
        assert_eq!(group.summary, before.summary, "re-merge changes nothing");
        assert_eq!(r1, vec![0, 1, 2, 3]);
    }

    #[test]
    fn merge_appends_one_new_node_and_edge() {
        let mut store = test_store();
        store.insert_trajectory(&walk(&[0, 1, 2, 3], 0, 0, Point::new(0.0, 0.0))).unwrap();
        let (n_nodes, n_edges) = {
            let s = &store.groups()[0].summary;
            (s.nodes.len(), s.edges.len())
        };
        // Extends the path one node beyond node 3 (different goal avoids the
        // supersede path).
        store.insert_trajectory(&walk(&[0, 1, 2, 3, 5], 1, 0, Point::new(0.0, 0.0))).unwrap();
        let s = &store.groups()[0].summary;
        assert_eq!(s.nodes.len(), n_nodes + 1);
        assert_eq!(s.edges.len(), n_edges + 1);
    }

    #[test]
    fn insertion_order_does_not_change_final_size() {
        // Every pair shares at least four nodes, so any two of these can
        // merge; containment runs [1..4] within [0..4] within [0..5].
        let trajs = vec![
            walk(&[0, 1, 2, 3, 4], 0, 0, Point::new(0.0, 0.0)),
            walk(&[0, 1, 2, 3, 4, 5], 0, 3, Point::new(0.7, 2.0)),
            walk(&[1, 2, 3, 4], 0, 6, Point::new(-1.0, 0.3)),
        ];
        let mut counts = Vec::new();
        for order in [[0, 1, 2], [2, 1, 0], [1, 0, 2], [0, 2, 1], [2, 0, 1], [1, 2, 0]] {
            let mut store = test_store();
            for i in order {
                store.insert_trajectory(&trajs[i]).unwrap();
            }
            assert_eq!(store.groups().len(), 1, "order {order:?}");
            store.validate().unwrap();
            counts.push((store.chunk_count(), store.groups()[0].summary.nodes.len()));
        }
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    #[test]
    fn reinsertion_never_grows_the_store() {
        let trajs = vec![
            walk(&[0, 1, 2, 3], 0, 0, Point::new(0.0, 0.0)),
            walk(&[0, 1, 2, 3, 4], 1, 2, Point::new(0.5, -0.4)),
            walk(&[4, 3, 2, 5], 2, 0, Point::new(0.0, 0.0)),
        ];
        let mut store = test_store();
        for t in &trajs {
            store.insert_trajectory(t).unwrap();
        }
        let (chunks_before, groups_before) = (store.chunk_count(), store.groups().len());
        for t in &trajs {
            store.insert_trajectory(t).unwrap();
        }
        assert!(store.chunk_count() <= chunks_before);
        assert_eq!(store.groups().len(), groups_before);
        store.validate().unwrap();
    }

    /// Three layouts with disjoint geometry and distinct landmark patterns.
    fn layout_walk(layout: usize, variant: usize, goal: u16) -> TopoPolarTrajectory {
        let nodes: Vec<TopoNode> = (0..5)
            .map(|i| {
                let mut labels = [SectorLabel::Free; SECTOR_COUNT];
                labels[(layout * 4 + i) % SECTOR_COUNT] = SectorLabel::Category((layout % N_CAT) as u16);
                labels[(layout * 4 + i * 5 + 2) % SECTOR_COUNT] = SectorLabel::Obstacle;
                if i % 2 == 0 {
                    labels[(layout + i * 7) % SECTOR_COUNT] =
                        SectorLabel::Category(((layout + 1) % N_CAT) as u16);
                }
                // Layouts bend differently so no rigid transform can put four
                // nodes of one within tolerance of another's.
                let pos = match layout {
                    0 => Point::new(i as f64 * 0.9, 0.0),
                    1 => Point::new(i as f64 * 1.3, if i % 2 == 1 { 1.1 } else { 0.0 }),
                    _ => {
                        if i < 3 {
                            Point::new(0.0, i as f64 * 0.7)
                        } else {
                            Point::new((i - 2) as f64 * 0.7, 1.4)
                        }
                    }
                };
                TopoNode { id: NodeId(i as u32), world_pos: pos, sector_vector: SectorVector(labels) }
            })
            .collect();
        let mut traj = TopoPolarTrajectory {
            nodes,
            goal_category: goal,
            source_tag: format!("layout{layout}/walk{variant}"),
        };
        // Variants visit a node subset so chunks differ within a group.
        if variant == 1 {
            traj.nodes.truncate(4);
            traj.goal_category = (goal + 1) % N_CAT as u16;
        }
        traj
    }

    fn layout_store() -> TrajRagStore {
        let mut store = test_store();
        for layout in 0..3 {
            for variant in 0..2 {
                store.insert_trajectory(&layout_walk(layout, variant, 0)).unwrap();
            }
        }
        store
    }

    #[test]
    fn coarse_retrieval_finds_the_home_group() {
        let store = layout_store();
        assert_eq!(store.groups().len(), 3, "one group per layout");
        for layout in 0..3 {
            let query = layout_walk(layout, 0, 0);
            let ranked = store.coarse_retrieve(&query, 3).unwrap();
            assert_eq!(ranked[0].0, store.groups()[layout].id, "layout {layout}: {ranked:?}");
            // Dense mutual-KNN output caps the pair-level inlier ratio well
            // below 1 even for a perfect match; demand a clear margin instead
            // of an absolute score.
            assert!(ranked[0].1 > 0.2, "own-layout score too weak: {ranked:?}");
            assert!(ranked[0].1 > 1.5 * ranked[1].1, "no margin over runner-up: {ranked:?}");
        }
    }

    #[test]
    fn coarse_retrieval_on_empty_store_is_empty() {
        let store = test_store();
        let q = walk(&[0, 1], 0, 0, Point::new(0.0, 0.0));
        assert!(store.coarse_retrieve(&q, 5).unwrap().is_empty());
    }

    #[test]
    fn unmatched_query_returns_zero_scored_tail() {
        let store = layout_store();
        // All-unknown sectors match nothing anywhere.
        let nodes = (0..3)
            .map(|i| TopoNode {
                id: NodeId(i),
                world_pos: Point::new(i as f64 * 20.0, 50.0),
                sector_vector: SectorVector::uniform(SectorLabel::Unknown),
            })
            .collect();
        let q = TopoPolarTrajectory { nodes, goal_category: 0, source_tag: "q".into() };
        let ranked = store.coarse_retrieve(&q, 10).unwrap();
        assert_eq!(ranked.len(), 3);
        // Ties at score zero fall back to id order.
        let ids: Vec<GroupId> = ranked.iter().map(|r| r.0).collect();
        assert_eq!(ids, vec![GroupId(0), GroupId(1), GroupId(2)]);
    }

    #[test]
    fn fine_retrieval_ranks_own_embedding_first() {
        let store = layout_store();
        let gids: Vec<GroupId> = store.groups().iter().map(|g| g.id).collect();
        for chunk in store.chunks() {
            let ranked = store.fine_retrieve(&gids, &chunk.embedding, 3).unwrap();
            assert_eq!(ranked[0].0, chunk.id);
            assert!((ranked[0].1 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fine_retrieval_matches_linear_scan_oracle() {
        let store = layout_store();
        let gids: Vec<GroupId> = store.groups().iter().map(|g| g.id).collect();
        let dim = store.chunks().next().unwrap().embedding.0.len();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() {
                *x /= n;
            }
            let q = TrajectoryEmbedding(v);
            let got = store.fine_retrieve(&gids, &q, 1).unwrap();
            let mut best: Option<(ChunkId, f64)> = None;
            for c in store.chunks() {
                let s = q.dot(&c.embedding);
                if best.map_or(true, |(bid, bs)| s > bs || (s == bs && c.id < bid)) {
                    best = Some((c.id, s));
                }
            }
            assert_eq!(got[0], best.unwrap());
        }
    }

    #[test]
    fn fine_retrieval_breaks_zero_ties_by_id() {
        let store = layout_store();
        let gids: Vec<GroupId> = store.groups().iter().map(|g| g.id).collect();
        let dim = store.chunks().next().unwrap().embedding.0.len();
        let q = TrajectoryEmbedding(vec![0.0; dim]);
        let ranked = store.fine_retrieve(&gids, &q, usize::MAX).unwrap();
        let ids: Vec<ChunkId> = ranked.iter().map(|r| r.0).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert!(ranked.iter().all(|r| r.1 == 0.0));
    }

    #[test]
    fn fine_retrieval_rejects_unknown_group() {
        let store = layout_store();
        let dim = store.chunks().next().unwrap().embedding.0.len();
        let q = TrajectoryEmbedding(vec![0.0; dim]);
        assert!(matches!(
            store.fine_retrieve(&[GroupId(99)], &q, 1),
            Err(StoreError::UnknownGroup(99))
        ));
    }

    #[test]
    fn fine_retrieval_stays_inside_the_given_groups() {
        let store = layout_store();
        let g0 = store.groups()[0].id;
        let inside: BTreeSet<ChunkId> = store.groups()[0].chunk_ids().collect();
        let dim = store.chunks().next().unwrap().embedding.0.len();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ranked = store.fine_retrieve(&[g0], &TrajectoryEmbedding(v), 10).unwrap();
            assert!(ranked.iter().all(|r| inside.contains(&r.0)), "{ranked:?}");
        }
    }

    #[test]
    fn empty_trajectory_insert_is_an_error() {
        let mut store = test_store();
        let t = TopoPolarTrajectory { nodes: vec![], goal_category: 0, source_tag: "t".into() };
        assert!(matches!(store.insert_trajectory(&t), Err(StoreError::EmptyTrajectory)));
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = test_store();
        store.save(dir.path()).unwrap();
        let back = TrajRagStore::load(dir.path()).unwrap();
        assert_eq!(back.groups().len(), 0);
        assert_eq!(back.chunk_count(), 0);
        assert_eq!(back.params(), store.params());
        assert_eq!(back.categories(), store.categories());
        assert_eq!(back.config, store.config);
    }

    fn store_eq(a: &TrajRagStore, b: &TrajRagStore) {
        assert_eq!(a.config, b.config);
        assert_eq!(a.categories, b.categories);
        assert_eq!(a.params, b.params);
        assert_eq!(a.groups, b.groups);
        let ac: Vec<&Chunk> = a.chunks().collect();
        let bc: Vec<&Chunk> = b.chunks().collect();
        assert_eq!(ac, bc);
        assert_eq!((a.next_group, a.next_chunk), (b.next_group, b.next_chunk));
    }

    #[test]
    fn populated_store_round_trips_deep_equal() {
        let mut store = layout_store();
        // Mix in offset walks so member transforms are non-trivial.
        store.insert_trajectory(&walk(&[0, 1, 2, 3], 1, 1, Point::new(0.3, 0.8))).unwrap();
        store.insert_trajectory(&walk(&[0, 1, 2, 3, 4], 2, 4, Point::new(-1.2, 0.1))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let back = TrajRagStore::load(dir.path()).unwrap();
        store_eq(&store, &back);
        // Saving the loaded store reproduces the manifest byte-exactly.
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        let m1 = std::fs::read_to_string(dir.path().join("manifest")).unwrap();
        let m2 = std::fs::read_to_string(dir2.path().join("manifest")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn truncated_manifest_fails_without_partial_store() {
        let dir = tempfile::tempdir().unwrap();
        let store = layout_store();
        store.save(dir.path()).unwrap();
        let manifest = dir.path().join("manifest");
        let text = std::fs::read_to_string(&manifest).unwrap();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        std::fs::write(&manifest, cut).unwrap();
        assert!(TrajRagStore::load(dir.path()).is_err());
    }

    #[test]
    fn corrupt_chunk_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let store = layout_store();
        store.save(dir.path()).unwrap();
        let chunk0 = dir.path().join("chunks").join("0");
        let mut text = std::fs::read_to_string(&chunk0).unwrap();
        text = text.replace("embedding ", "embedding bogus ");
        std::fs::write(&chunk0, text).unwrap();
        let err = TrajRagStore::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn retraining_reembeds_chunks_and_reduces_loss() {
        let mut store = layout_store();
        let before: Vec<TrajectoryEmbedding> =
            store.chunks().map(|c| c.embedding.clone()).collect();
        let cfg = TrainConfig { epochs: 30, d_out: 8, ..TrainConfig::default() };
        let report = store.retrain_projection(&cfg).unwrap();
        assert!(report.final_loss <= report.initial_loss);
        let after: Vec<TrajectoryEmbedding> = store.chunks().map(|c| c.embedding.clone()).collect();
        assert_ne!(before, after);
        store.validate().unwrap();
    }
}
