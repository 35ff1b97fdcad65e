//! Procedural indoor scenes and the closed perception–planning loop: ray-cast
//! observation onto a partial map, frontier-driven episodes with pluggable
//! planners, scripted data-collection walks, and paired evaluation of a
//! guided agent against a baseline over a shared scene family.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{wrap_angle, Cell, Point};
use crate::textio::{tokens, LineCursor, TextError};
use crate::gridmap::{
    extract_frontiers, ChannelId, Frontier, GridError, Mask, PolarSampler, SemanticMap,
    SECTOR_ANGLE, SECTOR_COUNT,
};
use crate::matching::{rotate_sector, Se2Transform};
use crate::nav::{
    arrival_radius, astar, candidate_paths, next_action, retrieve_experiences, Action, AgentPose,
    DecisionRecord, HeuristicPlanner, NavError, Planner, RandomFrontierPlanner, FORWARD_METERS,
};
use crate::store::{InsertOutcome, StoreError, TrajRagStore};
use crate::topo::{
    build_topo_polar_trajectory, NodeId, TopoConfig, TopoError, TopoNode, TopoPolarTrajectory,
};

/// Solid wall thickness around the floor plan, in cells.
const OUTER_WALL: i32 = 2;
/// Minimum interior side of a generated room, in cells.
const ROOM_MIN: i32 = 6;
/// Hard cap on actions in a scripted walk before it is declared stuck.
const WALK_STEP_LIMIT: usize = 20_000;
/// Consecutive blocked forward moves tolerated before a waypoint is retired.
const BUMP_LIMIT: usize = 4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible scene parameters: {0}")]
    InfeasibleParams(String),
    #[error("generated scene has disconnected free space")]
    DisconnectedScene,
    #[error("scene has no object of category {0}")]
    GoalMissing(u16),
    #[error("start pose is not in free space")]
    BlockedStartPose,
    #[error("scripted walk exceeded {0} actions without reaching its target")]
    WalkStuck(usize),
    #[error("no episode results to aggregate")]
    NoResults,
    #[error("episode result has a non-positive shortest path length")]
    BadShortest,
    #[error("internal: {0}")]
    Internal(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Nav(#[from] NavError),
    #[error(transparent)]
    Topo(#[from] TopoError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Knobs for the procedural floor-plan generator.
#[derive(Debug, Clone)]
pub struct SceneParams {
    pub width_m: f64,
    pub height_m: f64,
    pub resolution: f64,
    /// Number of rooms, laid out on a jittered grid of slots.
    pub rooms: u32,
    /// Extra L-corridors carved on top of the spanning tree.
    pub extra_corridors: u32,
    /// Density objects attempted per room, on top of the one guaranteed
    /// instance per category.
    pub objects_per_room: u32,
    pub categories: Vec<String>,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width_m: 16.0,
            height_m: 12.0,
            resolution: 0.1,
            rooms: 6,
            extra_corridors: 1,
            objects_per_room: 2,
            categories: ["bed", "chair", "table", "sofa", "plant", "sink"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// A placed object: a small block of obstacle cells labeled with a category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectInstance {
    pub category: u16,
    pub cells: Vec<Cell>,
}

/// Ground truth for one generated world: a fully explored semantic map, the
/// placed objects, and one interior center cell per room.
#[derive(Debug, Clone)]
pub struct Scene {
    pub map: SemanticMap,
    pub objects: Vec<ObjectInstance>,
    pub room_centers: Vec<Cell>,
    pub seed: u64,
}

const SCENE_HEADER: &str = "scene v1";

impl Scene {
    /// All cells occupied by objects of the given category.
    pub fn goal_cells(&self, category: u16) -> Vec<Cell> {
        self.objects
            .iter()
            .filter(|o| o.category == category)
            .flat_map(|o| o.cells.iter().copied())
            .collect()
    }

    /// Seed, room centers, and objects, followed by the full map block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(SCENE_HEADER);
        out.push('\n');
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("centers {}\n", self.room_centers.len()));
        for c in &self.room_centers {
            out.push_str(&format!("center {} {}\n", c.x, c.y));
        }
        out.push_str(&format!("objects {}\n", self.objects.len()));
        for o in &self.objects {
            out.push_str(&format!("object {}", o.category));
            for c in &o.cells {
                out.push_str(&format!(" {} {}", c.x, c.y));
            }
            out.push('\n');
        }
        out.push_str(&self.map.to_text());
        out
    }

    pub fn from_text(text: &str) -> Result<Scene, SimError> {
        let mut cur = LineCursor::new(text);
        cur.expect(SCENE_HEADER)?;
        let seed: u64 = {
            let s = cur.expect_key("seed")?;
            cur.parse_one(s.trim(), "seed")?
        };
        let n_centers: usize = {
            let s = cur.expect_key("centers")?;
            cur.parse_one(s.trim(), "center count")?
        };
        let mut room_centers = Vec::with_capacity(n_centers);
        for _ in 0..n_centers {
            let s = cur.expect_key("center")?;
            let toks = tokens(s);
            if toks.len() != 2 {
                return Err(TextError::at(cur.line_no(), "center expects `center <x> <y>`").into());
            }
            room_centers.push(Cell::new(
                cur.parse_one(toks[0], "center x")?,
                cur.parse_one(toks[1], "center y")?,
            ));
        }
        let n_objects: usize = {
            let s = cur.expect_key("objects")?;
            cur.parse_one(s.trim(), "object count")?
        };
        let mut objects = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let s = cur.expect_key("object")?;
            let toks = tokens(s);
            if toks.len() < 3 || toks.len() % 2 == 0 {
                return Err(TextError::at(
                    cur.line_no(),
                    "object expects `object <category> <x> <y> [<x> <y> ...]`",
                )
                .into());
            }
            let category: u16 = cur.parse_one(toks[0], "object category")?;
            let mut cells = Vec::with_capacity((toks.len() - 1) / 2);
            for pair in toks[1..].chunks(2) {
                cells.push(Cell::new(
                    cur.parse_one(pair[0], "object cell x")?,
                    cur.parse_one(pair[1], "object cell y")?,
                ));
            }
            objects.push(ObjectInstance { category, cells });
        }
        let map = SemanticMap::parse_block(&mut cur)?;
        let n_cat = map.categories().len() as u16;
        for o in &objects {
            if o.category >= n_cat {
                return Err(SimError::Internal(format!(
                    "scene object category {} out of range for {} categories",
                    o.category, n_cat
                )));
            }
            for c in &o.cells {
                if !map.in_bounds(*c) {
                    return Err(SimError::Internal(format!(
                        "scene object cell ({}, {}) is outside the map",
                        c.x, c.y
                    )));
                }
            }
        }
        for c in &room_centers {
            if !map.in_bounds(*c) {
                return Err(SimError::Internal(format!(
                    "scene room center ({}, {}) is outside the map",
                    c.x, c.y
                )));
            }
        }
        Ok(Scene { map, objects, room_centers, seed })
    }
}

/// Counts cells 4-connected to `from` in the mask. Zero when `from` is unset.
fn flood_count(free: &Mask, from: Cell) -> usize {
    if !free.get(from.x, from.y) {
        return 0;
    }
    let mut seen = Mask::new(free.width(), free.height());
    let mut queue = VecDeque::new();
    seen.set(from.x, from.y, true);
    queue.push_back(from);
    let mut count = 0;
    while let Some(c) = queue.pop_front() {
        count += 1;
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (c.x + dx, c.y + dy);
            if free.get(nx, ny) && !seen.get(nx, ny) {
                seen.set(nx, ny, true);
                queue.push_back(Cell::new(nx, ny));
            }
        }
    }
    count
}

fn carve_rect(free: &mut Mask, x0: i32, y0: i32, x1: i32, y1: i32) {
    for y in y0..=y1 {
        for x in x0..=x1 {
            free.set(x, y, true);
        }
    }
}

/// Carves a 2-cell-wide horizontal band covering rows `y` and `y + 1`.
fn carve_h(free: &mut Mask, xa: i32, xb: i32, y: i32) {
    for x in xa.min(xb)..=xa.max(xb) {
        free.set(x, y, true);
        free.set(x, y + 1, true);
    }
}

/// Carves a 2-cell-wide vertical band covering columns `x` and `x + 1`.
fn carve_v(free: &mut Mask, ya: i32, yb: i32, x: i32) {
    for y in ya.min(yb)..=ya.max(yb) {
        free.set(x, y, true);
        free.set(x + 1, y, true);
    }
}

/// Tries to place a `w`x`h` block of object cells against a wall of the room,
/// rejecting placements that cover a protected cell, disconnect free space,
/// or leave the block with no free 4-neighbor.
fn place_object(
    rng: &mut ChaCha8Rng,
    free: &mut Mask,
    rect: (i32, i32, i32, i32),
    protect: &[Cell],
    flood_from: Cell,
    category: u16,
) -> Option<ObjectInstance> {
    let (x0, y0, x1, y1) = rect;
    for _ in 0..60 {
        let w = rng.gen_range(1..=2);
        let h = rng.gen_range(1..=2);
        if x1 - x0 + 1 <= w || y1 - y0 + 1 <= h {
            continue;
        }
        let side: u8 = rng.gen_range(0..4);
        let (bx, by) = match side {
            0 => (x0, rng.gen_range(y0..=y1 - (h - 1))),
            1 => (x1 - (w - 1), rng.gen_range(y0..=y1 - (h - 1))),
            2 => (rng.gen_range(x0..=x1 - (w - 1)), y0),
            _ => (rng.gen_range(x0..=x1 - (w - 1)), y1 - (h - 1)),
        };
        let cells: Vec<Cell> = (0..h)
            .flat_map(|dy| (0..w).map(move |dx| Cell::new(bx + dx, by + dy)))
            .collect();
        if cells.iter().any(|c| !free.get(c.x, c.y)) {
            continue;
        }
        if cells.iter().any(|c| protect.contains(c)) {
            continue;
        }
        for c in &cells {
            free.set(c.x, c.y, false);
        }
        let connected = flood_count(free, flood_from) == free.set_count();
        let visible = cells.iter().any(|c| {
            [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(dx, dy)| free.get(c.x + dx, c.y + dy))
        });
        if connected && visible {
            return Some(ObjectInstance { category, cells });
        }
        for c in &cells {
            free.set(c.x, c.y, true);
        }
    }
    None
}

/// Generates a connected multi-room world: rooms on a jittered slot grid,
/// 2-cell-wide L-corridors along a random spanning tree (plus extras), and
/// wall-adjacent objects. Every category gets at least one instance, and the
/// same seed always yields the same scene.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene, SimError> {
    if params.rooms == 0 {
        return Err(SimError::InfeasibleParams("need at least one room".into()));
    }
    if params.categories.is_empty() {
        return Err(SimError::InfeasibleParams("need at least one category".into()));
    }
    if !(params.resolution > 0.0) {
        return Err(SimError::InfeasibleParams("resolution must be positive".into()));
    }
    let w = (params.width_m / params.resolution).round() as i32;
    let h = (params.height_m / params.resolution).round() as i32;
    let rooms = params.rooms as i32;
    let cols = (rooms as f64).sqrt().ceil() as i32;
    let rows = (rooms + cols - 1) / cols;
    let slot_w = (w - 2 * OUTER_WALL) / cols;
    let slot_h = (h - 2 * OUTER_WALL) / rows;
    if slot_w < ROOM_MIN + 2 || slot_h < ROOM_MIN + 2 {
        return Err(SimError::InfeasibleParams(format!(
            "{rooms} rooms do not fit a {w}x{h} cell map"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut free = Mask::new(w as u32, h as u32);

    let mut rects = Vec::with_capacity(params.rooms as usize);
    for i in 0..rooms {
        let (r, c) = (i / cols, i % cols);
        let sx = OUTER_WALL + c * slot_w;
        let sy = OUTER_WALL + r * slot_h;
        let (avail_w, avail_h) = (slot_w - 2, slot_h - 2);
        let rw = rng.gen_range((avail_w * 3 / 5).max(ROOM_MIN)..=avail_w);
        let rh = rng.gen_range((avail_h * 3 / 5).max(ROOM_MIN)..=avail_h);
        let x0 = sx + 1 + rng.gen_range(0..=avail_w - rw);
        let y0 = sy + 1 + rng.gen_range(0..=avail_h - rh);
        carve_rect(&mut free, x0, y0, x0 + rw - 1, y0 + rh - 1);
        rects.push((x0, y0, x0 + rw - 1, y0 + rh - 1));
    }
    let centers: Vec<Cell> = rects
        .iter()
        .map(|&(x0, y0, x1, y1)| Cell::new((x0 + x1) / 2, (y0 + y1) / 2))
        .collect();

    for i in 1..rooms as usize {
        let j = rng.gen_range(0..i);
        carve_h(&mut free, centers[i].x, centers[j].x, centers[i].y);
        carve_v(&mut free, centers[i].y, centers[j].y, centers[j].x);
    }
    if rooms > 1 {
        for _ in 0..params.extra_corridors {
            let a = rng.gen_range(0..rooms as usize);
            let b = rng.gen_range(0..rooms as usize);
            if a != b {
                carve_h(&mut free, centers[a].x, centers[b].x, centers[a].y);
                carve_v(&mut free, centers[a].y, centers[b].y, centers[b].x);
            }
        }
    }
    if flood_count(&free, centers[0]) != free.set_count() {
        return Err(SimError::DisconnectedScene);
    }

    let n_cat = params.categories.len();
    let mut objects = Vec::new();
    for cat in 0..n_cat {
        let room = if rooms == 1 { 0 } else { 1 + cat % (rooms as usize - 1) };
        match place_object(&mut rng, &mut free, rects[room], &centers, centers[0], cat as u16) {
            Some(o) => objects.push(o),
            None => {
                return Err(SimError::InfeasibleParams(format!(
                    "could not place an object of category {cat}"
                )))
            }
        }
    }
    for room in 0..rooms as usize {
        for _ in 0..params.objects_per_room {
            let cat = rng.gen_range(0..n_cat) as u16;
            if let Some(o) =
                place_object(&mut rng, &mut free, rects[room], &centers, centers[0], cat)
            {
                objects.push(o);
            }
        }
    }

    let mut map = SemanticMap::new(
        w as u32,
        h as u32,
        params.resolution,
        Point::new(0.0, 0.0),
        params.categories.clone(),
    );
    for y in 0..h {
        for x in 0..w {
            if free.get(x, y) {
                map.mark_explored(Cell::new(x, y));
            } else {
                map.mark_obstacle(Cell::new(x, y));
            }
        }
    }
    for o in &objects {
        for &c in &o.cells {
            map.mark_obstacle(c);
            map.mark_category(c, o.category)?;
        }
    }
    Ok(Scene { map, objects, room_centers: centers, seed })
}

/// Copies one ground-truth cell into the agent map, once. Re-revealing an
/// explored cell is a no-op, so observation stays cheap and idempotent.
fn reveal_cell(scene: &Scene, agent: &mut SemanticMap, cell: Cell) -> Result<(), SimError> {
    if agent.is_explored(cell.x, cell.y) {
        return Ok(());
    }
    if scene.map.is_obstacle(cell.x, cell.y) {
        agent.mark_obstacle(cell);
        for cat in 0..scene.map.categories().len() as u16 {
            if scene.map.channel(ChannelId::Semantic(cat))?.get(cell.x, cell.y) {
                agent.mark_category(cell, cat)?;
            }
        }
    } else {
        agent.mark_explored(cell);
    }
    Ok(())
}

/// Reveals ground truth along rays from the pose into the agent map. Rays
/// march in half-cell steps and stop at the first obstacle they reveal, so
/// walls occlude everything behind them.
pub fn observe(
    scene: &Scene,
    pose: &AgentPose,
    fov_deg: f64,
    range_m: f64,
    agent: &mut SemanticMap,
) -> Result<(), SimError> {
    if let Some(c) = scene.map.world_to_cell(pose.position) {
        reveal_cell(scene, agent, c)?;
    }
    let res = scene.map.resolution();
    let step = res / 2.0;
    let fov = fov_deg.to_radians().clamp(0.0, std::f64::consts::TAU);
    let n_rays = ((fov / (res / (2.0 * range_m))).ceil() as usize).max(1);
    for i in 0..n_rays {
        let angle = pose.heading - fov / 2.0 + (i as f64 + 0.5) * fov / n_rays as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut t = step;
        while t <= range_m + 1e-9 {
            let p = Point::new(pose.position.x + t * dx, pose.position.y + t * dy);
            let Some(cell) = scene.map.world_to_cell(p) else {
                break;
            };
            reveal_cell(scene, agent, cell)?;
            if scene.map.is_obstacle(cell.x, cell.y) {
                break;
            }
            t += step;
        }
    }
    Ok(())
}

/// First non-free ground-truth cell along one forward step from the pose,
/// or `None` when the move is clear.
fn first_blocking_cell(scene: &Scene, pose: &AgentPose) -> Option<Cell> {
    let res = scene.map.resolution();
    let n = ((FORWARD_METERS / (res / 2.0)).ceil() as usize).max(1);
    let (dx, dy) = (pose.heading.cos(), pose.heading.sin());
    for k in 1..=n {
        let t = FORWARD_METERS * k as f64 / n as f64;
        let p = Point::new(pose.position.x + t * dx, pose.position.y + t * dy);
        match scene.map.world_to_cell(p) {
            Some(c) if scene.map.is_free(c.x, c.y) => {}
            Some(c) => return Some(c),
            None => return Some(scene.map.world_to_cell(pose.position).unwrap_or(Cell::new(0, 0))),
        }
    }
    None
}

/// Applies one discrete action against ground truth. A forward move that
/// would cross a non-free cell leaves the pose unchanged; turns rotate in
/// place by one sector; stop is a no-op.
pub fn step(scene: &Scene, pose: &AgentPose, action: Action) -> AgentPose {
    match action {
        Action::Stop => *pose,
        Action::TurnLeft => AgentPose {
            position: pose.position,
            heading: wrap_angle(pose.heading + crate::nav::TURN_RADIANS),
        },
        Action::TurnRight => AgentPose {
            position: pose.position,
            heading: wrap_angle(pose.heading - crate::nav::TURN_RADIANS),
        },
        Action::Forward => {
            if first_blocking_cell(scene, pose).is_some() {
                return *pose;
            }
            AgentPose {
                position: Point::new(
                    pose.position.x + FORWARD_METERS * pose.heading.cos(),
                    pose.position.y + FORWARD_METERS * pose.heading.sin(),
                ),
                heading: pose.heading,
            }
        }
    }
}

/// Length in meters of the shortest 8-connected path from `start` to any
/// free cell within `success_radius` of an object of the goal category,
/// using the same movement rules as the agent's local planner. Infinite when
/// the goal region is unreachable.
pub fn shortest_length(
    scene: &Scene,
    start: Cell,
    goal_category: u16,
    success_radius: f64,
) -> Result<f64, SimError> {
    let goals = scene.goal_cells(goal_category);
    if goals.is_empty() {
        return Err(SimError::GoalMissing(goal_category));
    }
    let map = &scene.map;
    if !map.is_free(start.x, start.y) {
        return Err(SimError::BlockedStartPose);
    }
    let (w, h) = (map.width() as i32, map.height() as i32);
    let goal_pts: Vec<Point> = goals.iter().map(|&c| map.cell_center(c)).collect();
    let mut target = Mask::new(map.width(), map.height());
    for y in 0..h {
        for x in 0..w {
            if !map.is_free(x, y) {
                continue;
            }
            let p = map.cell_center(Cell::new(x, y));
            if goal_pts.iter().any(|g| g.distance(&p) <= success_radius) {
                target.set(x, y, true);
            }
        }
    }

    let idx = |c: Cell| (c.y * w + c.x) as usize;
    let mut dist = vec![f64::INFINITY; (w * h) as usize];
    let mut heap = std::collections::BinaryHeap::new();
    dist[idx(start)] = 0.0;
    heap.push(std::cmp::Reverse((ordered(0.0), start)));
    while let Some(std::cmp::Reverse((d, cell))) = heap.pop() {
        let d = d.0;
        if d > dist[idx(cell)] {
            continue;
        }
        if target.get(cell.x, cell.y) {
            return Ok(d * map.resolution());
        }
        for dy in -1..=1 {
            for dx in -1..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let n = Cell::new(cell.x + dx, cell.y + dy);
                if !map.is_free(n.x, n.y) {
                    continue;
                }
                if dx != 0 && dy != 0 && (!map.is_free(cell.x + dx, cell.y) || !map.is_free(cell.x, cell.y + dy)) {
                    continue;
                }
                let cost = if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                let nd = d + cost;
                if nd < dist[idx(n)] {
                    dist[idx(n)] = nd;
                    heap.push(std::cmp::Reverse((ordered(nd), n)));
                }
            }
        }
    }
    Ok(f64::INFINITY)
}

/// Wrapper giving f64 a total order for use in a binary heap.
#[derive(PartialEq)]
struct Ordered(f64);
impl Eq for Ordered {}
impl PartialOrd for Ordered {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ordered {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
fn ordered(v: f64) -> Ordered {
    Ordered(v)
}

/// Per-episode knobs: budgets, sensing, frontier and retrieval settings.
#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub budget_steps: usize,
    pub success_radius: f64,
    pub observe_range: f64,
    pub fov_deg: f64,
    pub frontier_min_size: usize,
    /// Groups consulted per retrieval, then chunks kept.
    pub top_m: usize,
    pub top_k: usize,
    /// Steps between rebuilds of the online topological trajectory.
    pub rebuild_every: usize,
    pub topo: TopoConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            budget_steps: 500,
            success_radius: 1.0,
            observe_range: 3.0,
            fov_deg: 360.0,
            frontier_min_size: 4,
            top_m: 3,
            top_k: 3,
            rebuild_every: 20,
            topo: TopoConfig::default(),
        }
    }
}

/// Keeps node identities stable across trajectory rebuilds by matching new
/// junctions to previous ones within half the node spacing.
#[derive(Debug, Default)]
struct NodeTracker {
    nodes: Vec<(u32, Point)>,
    next_id: u32,
}

impl NodeTracker {
    fn update(&mut self, built: &[TopoNode]) -> Vec<u32> {
        let mut assigned = Vec::with_capacity(built.len());
        let mut used: BTreeSet<u32> = BTreeSet::new();
        for node in built {
            let mut best: Option<(f64, u32)> = None;
            for &(id, p) in &self.nodes {
                if used.contains(&id) {
                    continue;
                }
                let d = p.distance(&node.world_pos);
                if d < 0.5 && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, id));
                }
            }
            let id = match best {
                Some((_, id)) => id,
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    id
                }
            };
            used.insert(id);
            assigned.push(id);
        }
        self.nodes = built.iter().zip(&assigned).map(|(n, &id)| (id, n.world_pos)).collect();
        assigned
    }
}

/// Re-expresses a trajectory in the frame given by `episode_from_world`,
/// rotating each sector vector by `-k0` sectors to match. Exact when the
/// frame rotation is `k0` whole sectors.
pub fn to_episode_frame(
    t: &TopoPolarTrajectory,
    episode_from_world: &Se2Transform,
    k0: i32,
) -> TopoPolarTrajectory {
    TopoPolarTrajectory {
        nodes: t
            .nodes
            .iter()
            .map(|n| TopoNode {
                id: n.id,
                world_pos: episode_from_world.apply(n.world_pos),
                sector_vector: rotate_sector(&n.sector_vector, -k0),
            })
            .collect(),
        goal_category: t.goal_category,
        source_tag: t.source_tag.clone(),
    }
}

/// Start frame of an episode: the world pose of the episode origin, with the
/// rotation snapped to whole sectors so sector vectors transform exactly.
pub fn episode_frame(start: &AgentPose) -> (Se2Transform, i32) {
    let k0 = (start.heading / SECTOR_ANGLE).round() as i32;
    (Se2Transform::new(k0 as f64 * SECTOR_ANGLE, start.position), k0)
}

/// Everything an episode leaves behind for scoring and consolidation.
#[derive(Debug)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    pub path_length: f64,
    pub shortest_length: f64,
    pub decisions: Vec<DecisionRecord>,
    /// Trajectory over the final agent map, in the episode frame.
    pub trajectory: Option<TopoPolarTrajectory>,
    /// world-from-episode transform of the start pose.
    pub frame: Se2Transform,
    pub end: AgentPose,
}

fn rebuild_trajectory(
    agent: &SemanticMap,
    trace: &[Point],
    goal_category: u16,
    topo_cfg: &TopoConfig,
    tracker: &mut NodeTracker,
) -> Option<TopoPolarTrajectory> {
    let mut t = build_topo_polar_trajectory(agent, trace, goal_category, topo_cfg, "online").ok()?;
    let stable = tracker.update(&t.nodes);
    for (n, id) in t.nodes.iter_mut().zip(&stable) {
        n.id = NodeId(*id);
    }
    Some(t)
}

fn nearest_node_id(t: &TopoPolarTrajectory, p: Point) -> Option<NodeId> {
    t.nodes
        .iter()
        .min_by(|a, b| {
            a.world_pos
                .distance(&p)
                .total_cmp(&b.world_pos.distance(&p))
                .then(a.id.0.cmp(&b.id.0))
        })
        .map(|n| n.id)
}

fn pose_cell(map: &SemanticMap, pose: &AgentPose) -> Result<Cell, SimError> {
    map.world_to_cell(pose.position)
        .ok_or_else(|| SimError::Internal("agent pose left the map".into()))
}

/// Plans a path to the nearest known goal cell not yet retired, trying the
/// eight closest candidates. Returns the path and the requested target cell.
fn plan_to_goal(
    agent: &SemanticMap,
    pose: &AgentPose,
    goal_category: u16,
    visited: &BTreeSet<Cell>,
) -> Result<Option<(Vec<Cell>, Cell)>, SimError> {
    let mut cells: Vec<Cell> = agent.channel(ChannelId::Semantic(goal_category))?.iter_set().collect();
    if cells.is_empty() {
        return Ok(None);
    }
    let here = pose.position;
    cells.sort_by(|a, b| {
        agent.cell_center(*a).distance(&here).total_cmp(&agent.cell_center(*b).distance(&here))
    });
    let start = pose_cell(agent, pose)?;
    for c in cells.into_iter().take(8) {
        if visited.contains(&c) {
            continue;
        }
        match astar(agent, start, c) {
            Ok(p) => return Ok(Some((p, c))),
            Err(NavError::Unreachable(..)) | Err(NavError::OutsideMap(..)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(None)
}

/// Heads for the nearest frontier not yet retired: the default exploration
/// move when no planner decision is pending.
fn continue_to_frontier(
    agent: &SemanticMap,
    pose: &AgentPose,
    cfg: &EpisodeConfig,
    visited: &BTreeSet<Cell>,
) -> Result<Option<(Vec<Cell>, Cell)>, SimError> {
    let sampler = PolarSampler::new(agent, cfg.topo.dilation_radius);
    let mut frontiers = extract_frontiers(agent, cfg.frontier_min_size, &sampler, cfg.topo.sample_range);
    frontiers.sort_by(|a, b| {
        a.centroid.distance(&pose.position).total_cmp(&b.centroid.distance(&pose.position))
    });
    let start = pose_cell(agent, pose)?;
    for f in &frontiers {
        let Some(cell) = agent.world_to_cell(f.centroid) else {
            continue;
        };
        if visited.contains(&cell) {
            continue;
        }
        match astar(agent, start, cell) {
            Ok(p) => return Ok(Some((p, cell))),
            Err(NavError::Unreachable(..)) | Err(NavError::OutsideMap(..)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(None)
}

/// One planner invocation: candidate routes to every reachable frontier in
/// the episode frame, per-candidate retrieval, a decision, and a grid path
/// toward the chosen frontier (falling back through the others in index
/// order). `None` when there is nothing to decide over.
#[allow(clippy::too_many_arguments)]
fn plan_at_node(
    agent: &SemanticMap,
    pose: &AgentPose,
    traj_world: &TopoPolarTrajectory,
    agent_node: NodeId,
    store: &TrajRagStore,
    planner: &mut dyn Planner,
    cfg: &EpisodeConfig,
    episode_from_world: &Se2Transform,
    world_from_episode: &Se2Transform,
    k0: i32,
    goal_category: u16,
    goal_name: &str,
    visited: &BTreeSet<Cell>,
    step_no: usize,
) -> Result<Option<(Vec<Cell>, Cell, DecisionRecord)>, SimError> {
    let sampler = PolarSampler::new(agent, cfg.topo.dilation_radius);
    let frontiers = extract_frontiers(agent, cfg.frontier_min_size, &sampler, cfg.topo.sample_range);
    if frontiers.is_empty() {
        return Ok(None);
    }
    let traj_e = to_episode_frame(traj_world, episode_from_world, k0);
    let frontiers_e: Vec<Frontier> = frontiers
        .iter()
        .map(|f| Frontier {
            cells: f.cells.clone(),
            centroid: episode_from_world.apply(f.centroid),
            size: f.size,
            sector_vector: rotate_sector(&f.sector_vector, -k0),
        })
        .collect();
    let candidates = candidate_paths(&traj_e, agent_node, &frontiers_e)?;
    if candidates.is_empty() {
        return Ok(None);
    }
    let mut experiences = Vec::with_capacity(candidates.len());
    for c in &candidates {
        experiences.push(retrieve_experiences(store, c, goal_category, cfg.top_m, cfg.top_k)?);
    }
    let decision = planner.plan(&candidates, &experiences, goal_name)?;
    let record =
        DecisionRecord { step: step_no, scores: decision.scores.clone(), chosen: decision.chosen };
    let start = pose_cell(agent, pose)?;
    // Fallback order honors the planner's ranking: chosen first, then the
    // rest by descending score (index order on ties, which keeps the random
    // baseline's uniform scores behaving like plain index order).
    let score_of = |i: usize| decision.scores.get(i).copied().unwrap_or(f64::NEG_INFINITY);
    let mut rest: Vec<usize> = (0..candidates.len()).filter(|&i| i != decision.chosen).collect();
    rest.sort_by(|&a, &b| score_of(b).total_cmp(&score_of(a)).then(a.cmp(&b)));
    for idx in std::iter::once(decision.chosen).chain(rest) {
        let world_centroid = world_from_episode.apply(candidates[idx].frontier.centroid);
        let Some(cell) = agent.world_to_cell(world_centroid) else {
            continue;
        };
        if visited.contains(&cell) {
            continue;
        }
        match astar(agent, start, cell) {
            Ok(p) => return Ok(Some((p, cell, record))),
            Err(NavError::Unreachable(..)) | Err(NavError::OutsideMap(..)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(None)
}

/// Runs one goal-directed episode: observe, keep an online topological
/// trajectory over the growing map, invoke the planner whenever the nearest
/// stable junction changes, push to frontiers until the goal category is
/// seen, then head for it and stop. Failure (budget, dead ends, unreachable
/// goals) is a result, not an error.
pub fn run_episode(
    scene: &Scene,
    start: AgentPose,
    goal_category: u16,
    planner: &mut dyn Planner,
    store: &TrajRagStore,
    cfg: &EpisodeConfig,
) -> Result<EpisodeResult, SimError> {
    let goals = scene.goal_cells(goal_category);
    if goals.is_empty() {
        return Err(SimError::GoalMissing(goal_category));
    }
    let start_cell = scene.map.world_to_cell(start.position).ok_or(SimError::BlockedStartPose)?;
    if !scene.map.is_free(start_cell.x, start_cell.y) {
        return Err(SimError::BlockedStartPose);
    }
    let shortest = shortest_length(scene, start_cell, goal_category, cfg.success_radius)?;
    let goal_name = scene.map.categories()[goal_category as usize].clone();
    let (frame, k0) = episode_frame(&start);
    let inv = frame.inverse();

    let mut agent = SemanticMap::new(
        scene.map.width(),
        scene.map.height(),
        scene.map.resolution(),
        scene.map.origin(),
        scene.map.categories().to_vec(),
    );
    let mut pose = start;
    let mut trace = vec![pose.position];
    let mut steps = 0usize;
    let mut path_length = 0.0;
    let mut decisions = Vec::new();
    let mut goal_mode = false;
    let mut stop_issued = false;
    let mut current_path: Option<Vec<Cell>> = None;
    let mut current_waypoint: Option<Cell> = None;
    let mut path_to_goal = false;
    let mut visited_waypoints: BTreeSet<Cell> = BTreeSet::new();
    // Frontier targets dropped mid-route by a planner switch. Two strikes
    // soft-retire a target so deterministic planners cannot flip-flop between
    // the same pair forever; the set is amnestied rather than letting the
    // episode end with unexplored frontiers on the books.
    let mut abandon_strikes: BTreeMap<Cell, usize> = BTreeMap::new();
    let mut flapped: BTreeSet<Cell> = BTreeSet::new();
    let mut tracker = NodeTracker::default();
    let mut traj: Option<TopoPolarTrajectory> = None;
    let mut prev_nearest: Option<NodeId> = None;
    let mut last_build: Option<usize> = None;
    let mut bumps = 0usize;

    while steps < cfg.budget_steps {
        observe(scene, &pose, cfg.fov_deg, cfg.observe_range, &mut agent)?;
        if !goal_mode && agent.channel(ChannelId::Semantic(goal_category))?.any() {
            goal_mode = true;
            current_path = None;
            current_waypoint = None;
            path_to_goal = false;
        }
        if !goal_mode {
            if last_build.map_or(true, |s| steps - s >= cfg.rebuild_every) {
                traj = rebuild_trajectory(&agent, &trace, goal_category, &cfg.topo, &mut tracker);
                last_build = Some(steps);
            }
            if let Some(t) = &traj {
                let nearest = nearest_node_id(t, pose.position);
                if nearest != prev_nearest {
                    prev_nearest = nearest;
                    if let Some(agent_node) = nearest {
                        let blocked: BTreeSet<Cell> =
                            visited_waypoints.union(&flapped).cloned().collect();
                        if let Some((p, w, record)) = plan_at_node(
                            &agent,
                            &pose,
                            t,
                            agent_node,
                            store,
                            planner,
                            cfg,
                            &inv,
                            &frame,
                            k0,
                            goal_category,
                            &goal_name,
                            &blocked,
                            steps,
                        )? {
                            if let Some(prev) = current_waypoint {
                                if prev != w {
                                    let strikes = abandon_strikes.entry(prev).or_insert(0);
                                    *strikes += 1;
                                    if *strikes >= 2 {
                                        flapped.insert(prev);
                                    }
                                }
                            }
                            decisions.push(record);
                            current_path = Some(p);
                            current_waypoint = Some(w);
                            path_to_goal = false;
                        }
                    }
                }
            }
        }

        let mut exhausted = false;
        let action = loop {
            if current_path.is_none() {
                if goal_mode {
                    if let Some((p, w)) = plan_to_goal(&agent, &pose, goal_category, &visited_waypoints)? {
                        current_path = Some(p);
                        current_waypoint = Some(w);
                        path_to_goal = true;
                    }
                }
                if current_path.is_none() {
                    let blocked: BTreeSet<Cell> =
                        visited_waypoints.union(&flapped).cloned().collect();
                    if let Some((p, w)) = continue_to_frontier(&agent, &pose, cfg, &blocked)? {
                        current_path = Some(p);
                        current_waypoint = Some(w);
                        path_to_goal = false;
                    }
                }
            }
            let Some(path) = &current_path else {
                exhausted = true;
                break Action::Stop;
            };
            // Contact with the last stretch of a goal approach counts as
            // arrival: the remaining gap is below the map's resolution of
            // maneuvering.
            if path_to_goal && bumps > 0 {
                if let Some(&last) = path.last() {
                    if pose.position.distance(&agent.cell_center(last))
                        <= 2.0 * arrival_radius(agent.resolution())
                    {
                        break Action::Stop;
                    }
                }
            }
            let a = next_action(&agent, path, &pose);
            if a == Action::Stop && !path_to_goal {
                if let Some(w) = current_waypoint.take() {
                    visited_waypoints.insert(w);
                }
                current_path = None;
                continue;
            }
            break a;
        };
        if exhausted {
            if !flapped.is_empty() {
                flapped.clear();
                abandon_strikes.clear();
                continue;
            }
            break;
        }
        if action == Action::Stop {
            steps += 1;
            stop_issued = true;
            break;
        }
        let next = step(scene, &pose, action);
        steps += 1;
        if action == Action::Forward && next.position == pose.position {
            if let Some(c) = first_blocking_cell(scene, &pose) {
                reveal_cell(scene, &mut agent, c)?;
            }
            bumps += 1;
            if bumps >= BUMP_LIMIT {
                if let Some(w) = current_waypoint.take() {
                    visited_waypoints.insert(w);
                }
                current_path = None;
                path_to_goal = false;
                bumps = 0;
            }
        } else {
            if action == Action::Forward {
                bumps = 0;
                path_length += next.position.distance(&pose.position);
            }
            pose = next;
            if action == Action::Forward {
                trace.push(pose.position);
            }
        }
    }

    let success = stop_issued
        && goals
            .iter()
            .map(|&c| scene.map.cell_center(c).distance(&pose.position))
            .fold(f64::INFINITY, f64::min)
            <= cfg.success_radius;
    let trajectory =
        build_topo_polar_trajectory(&agent, &trace, goal_category, &cfg.topo, "episode")
            .ok()
            .map(|t| to_episode_frame(&t, &inv, k0));
    Ok(EpisodeResult {
        success,
        steps,
        path_length,
        shortest_length: shortest,
        decisions,
        trajectory,
        frame,
        end: pose,
    })
}

/// A completed data-collection walk: its trajectory in the episode frame,
/// the frame itself, and what the walk cost.
#[derive(Debug)]
pub struct ScriptedWalk {
    pub trajectory: TopoPolarTrajectory,
    pub frame: Se2Transform,
    pub path_length: f64,
    pub steps: usize,
    pub end: AgentPose,
}

/// Drives the agent along ground-truth grid paths through `via` and then to
/// the goal object nearest the last leg, observing as it goes, and builds a
/// trajectory from what was actually seen.
pub fn scripted_walk(
    scene: &Scene,
    start: AgentPose,
    via: &[Cell],
    goal_category: u16,
    cfg: &EpisodeConfig,
    source_tag: &str,
) -> Result<ScriptedWalk, SimError> {
    let goals = scene.goal_cells(goal_category);
    if goals.is_empty() {
        return Err(SimError::GoalMissing(goal_category));
    }
    let start_cell = scene.map.world_to_cell(start.position).ok_or(SimError::BlockedStartPose)?;
    if !scene.map.is_free(start_cell.x, start_cell.y) {
        return Err(SimError::BlockedStartPose);
    }
    let (frame, k0) = episode_frame(&start);
    let inv = frame.inverse();
    let mut agent = SemanticMap::new(
        scene.map.width(),
        scene.map.height(),
        scene.map.resolution(),
        scene.map.origin(),
        scene.map.categories().to_vec(),
    );
    let mut pose = start;
    let mut trace = vec![pose.position];
    let mut steps = 0usize;
    let mut path_length = 0.0;
    observe(scene, &pose, cfg.fov_deg, cfg.observe_range, &mut agent)?;

    let mut legs: Vec<Cell> = via.to_vec();
    let anchor = legs.last().copied().unwrap_or(start_cell);
    let anchor_pt = scene.map.cell_center(anchor);
    let goal_cell = goals
        .iter()
        .copied()
        .min_by(|a, b| {
            scene
                .map
                .cell_center(*a)
                .distance(&anchor_pt)
                .total_cmp(&scene.map.cell_center(*b).distance(&anchor_pt))
        })
        .expect("goal cells checked non-empty");
    legs.push(goal_cell);

    for leg in legs {
        let mut path = astar(&scene.map, pose_cell(&scene.map, &pose)?, leg)?;
        let mut bumps = 0usize;
        loop {
            let action = next_action(&scene.map, &path, &pose);
            if action == Action::Stop {
                break;
            }
            let next = step(scene, &pose, action);
            steps += 1;
            if steps > WALK_STEP_LIMIT {
                return Err(SimError::WalkStuck(WALK_STEP_LIMIT));
            }
            if action == Action::Forward && next.position == pose.position {
                bumps += 1;
                if bumps > 8 {
                    return Err(SimError::WalkStuck(steps));
                }
                let near_end = path.last().map_or(false, |&last| {
                    pose.position.distance(&scene.map.cell_center(last))
                        <= 2.0 * arrival_radius(scene.map.resolution())
                });
                if near_end {
                    break;
                }
                path = astar(&scene.map, pose_cell(&scene.map, &pose)?, leg)?;
                continue;
            }
            if action == Action::Forward {
                bumps = 0;
                path_length += next.position.distance(&pose.position);
            }
            pose = next;
            observe(scene, &pose, cfg.fov_deg, cfg.observe_range, &mut agent)?;
            if action == Action::Forward {
                trace.push(pose.position);
            }
        }
    }
    let t = build_topo_polar_trajectory(&agent, &trace, goal_category, &cfg.topo, source_tag)?;
    Ok(ScriptedWalk {
        trajectory: to_episode_frame(&t, &inv, k0),
        frame,
        path_length,
        steps,
        end: pose,
    })
}

/// Samples a free start pose with a sector-aligned heading, rejecting cells
/// within `clearance` meters of any cell in `avoid`.
pub fn sample_start(
    scene: &Scene,
    rng: &mut ChaCha8Rng,
    avoid: &[Cell],
    clearance: f64,
) -> Result<AgentPose, SimError> {
    for _ in 0..500 {
        let x = rng.gen_range(0..scene.map.width() as i32);
        let y = rng.gen_range(0..scene.map.height() as i32);
        if !scene.map.is_free(x, y) {
            continue;
        }
        let p = scene.map.cell_center(Cell::new(x, y));
        if avoid.iter().any(|c| scene.map.cell_center(*c).distance(&p) <= clearance) {
            continue;
        }
        let heading = rng.gen_range(0..SECTOR_COUNT as i32) as f64 * SECTOR_ANGLE;
        return Ok(AgentPose { position: p, heading });
    }
    Err(SimError::InfeasibleParams("could not sample a free start pose".into()))
}

/// Tally of what happened to scripted walks during knowledge-base building.
#[derive(Debug, Default, Clone)]
pub struct KbReport {
    pub walks_attempted: usize,
    pub inserted_new: usize,
    pub merged: usize,
    pub discarded: usize,
    pub superseded: usize,
    pub skipped: usize,
}

/// Populates the store with scripted tours of already-built scenes: each
/// scene contributes `episodes_per_scene` walks whose goal categories cycle
/// through the store's category list. Every walk gets a seeded start and a
/// rotated room tour. Walks that cannot be completed are skipped, not fatal.
pub fn build_kb_over_scenes(
    store: &mut TrajRagStore,
    scenes: &[Scene],
    episodes_per_scene: usize,
    root_seed: u64,
    cfg: &EpisodeConfig,
) -> Result<KbReport, SimError> {
    let mut report = KbReport::default();
    for scene in scenes {
        if store.categories() != scene.map.categories() {
            return Err(SimError::Internal(
                "store categories differ from scene categories".into(),
            ));
        }
        let scene_seed = scene.seed;
        let n_cats = scene.map.categories().len();
        for episode in 0..episodes_per_scene {
            let goal = (episode % n_cats) as u16;
            report.walks_attempted += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(
                root_seed ^ scene_seed.wrapping_mul(0x9E3779B97F4A7C15) ^ episode as u64,
            );
            let Ok(start) = sample_start(scene, &mut rng, &[], 0.0) else {
                report.skipped += 1;
                continue;
            };
            let rot = rng.gen_range(0..scene.room_centers.len());
            let via: Vec<Cell> = (0..scene.room_centers.len())
                .map(|i| scene.room_centers[(i + rot) % scene.room_centers.len()])
                .collect();
            let tag = format!("scene{scene_seed}-ep{episode}-goal{goal}");
            match scripted_walk(scene, start, &via, goal, cfg, &tag) {
                Ok(w) => match store.insert_trajectory(&w.trajectory)? {
                    InsertOutcome::NewGroup { .. } => report.inserted_new += 1,
                    InsertOutcome::MergedInto { .. } => report.merged += 1,
                    InsertOutcome::DiscardedRedundant { .. } => report.discarded += 1,
                    InsertOutcome::SupersededExisting { .. } => report.superseded += 1,
                },
                Err(_) => report.skipped += 1,
            }
        }
    }
    Ok(report)
}

/// [`build_kb_over_scenes`] over freshly generated scenes, one per seed.
pub fn build_kb(
    store: &mut TrajRagStore,
    scene_seeds: &[u64],
    params: &SceneParams,
    episodes_per_scene: usize,
    root_seed: u64,
    cfg: &EpisodeConfig,
) -> Result<KbReport, SimError> {
    let scenes = scene_seeds
        .iter()
        .map(|&s| generate_scene(s, params))
        .collect::<Result<Vec<_>, _>>()?;
    build_kb_over_scenes(store, &scenes, episodes_per_scene, root_seed, cfg)
}

/// Aggregate episode quality: success rate and path-length-weighted success.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub spl: f64,
    pub mean_path_length: f64,
}

/// Success rate and SPL over a batch. Every successful episode contributes
/// `shortest / max(path, shortest)`; failures contribute zero. Errors on an
/// empty batch or a non-positive shortest length.
pub fn compute_metrics(results: &[EpisodeResult]) -> Result<Metrics, SimError> {
    if results.is_empty() {
        return Err(SimError::NoResults);
    }
    let mut spl_sum = 0.0;
    let mut successes = 0usize;
    let mut total_len = 0.0;
    for r in results {
        if !(r.shortest_length > 0.0) {
            return Err(SimError::BadShortest);
        }
        total_len += r.path_length;
        if r.success {
            successes += 1;
            spl_sum += r.shortest_length / r.path_length.max(r.shortest_length);
        }
    }
    let n = results.len() as f64;
    Ok(Metrics {
        episodes: results.len(),
        successes,
        success_rate: successes as f64 / n,
        spl: spl_sum / n,
        mean_path_length: total_len / n,
    })
}

/// What one paired episode was asked to do.
#[derive(Debug, Clone)]
pub struct EpisodeSetup {
    pub episode_seed: u64,
    pub scene_seed: u64,
    pub goal: u16,
}

/// Guided-versus-baseline evaluation over one scene family.
#[derive(Debug)]
pub struct PairedOutcome {
    pub guided: Metrics,
    pub baseline: Metrics,
    pub setups: Vec<EpisodeSetup>,
    pub guided_results: Vec<EpisodeResult>,
    pub baseline_results: Vec<EpisodeResult>,
    /// Episode trajectories folded back into the guided store between rounds.
    pub consolidated: usize,
}

/// Runs each episode seed twice from an identical start: once with the
/// experience-guided planner over `store`, once with a seeded random-frontier
/// baseline over an empty store. Episode seeds cycle over the scene seeds,
/// and goals are drawn from all categories.
pub fn evaluate_paired(
    store: &TrajRagStore,
    scene_seeds: &[u64],
    params: &SceneParams,
    episode_seeds: &[u64],
    cfg: &EpisodeConfig,
) -> Result<PairedOutcome, SimError> {
    let goals: Vec<u16> = (0..params.categories.len() as u16).collect();
    evaluate_paired_threaded(store, scene_seeds, params, episode_seeds, &goals, cfg, 1)
}

/// [`evaluate_paired`] with an explicit goal pool, fanned out across worker
/// threads. Episodes run in rounds of one pass over the scene cycle: within a
/// round every episode reads a frozen snapshot of the guided store, and after
/// the round each completed guided trajectory is folded back into the store in
/// episode order, so later rounds retrieve experience the agent itself
/// collected. Results are identical for any thread count: rounds are a fixed
/// function of the episode list, every episode's randomness is derived from
/// its own seed, and results are gathered by episode index.
pub fn evaluate_paired_threaded(
    store: &TrajRagStore,
    scene_seeds: &[u64],
    params: &SceneParams,
    episode_seeds: &[u64],
    goal_pool: &[u16],
    cfg: &EpisodeConfig,
    threads: usize,
) -> Result<PairedOutcome, SimError> {
    if scene_seeds.is_empty() || episode_seeds.is_empty() {
        return Err(SimError::InfeasibleParams("need scene and episode seeds".into()));
    }
    if goal_pool.is_empty() || goal_pool.iter().any(|&g| g as usize >= params.categories.len()) {
        return Err(SimError::InfeasibleParams("goal pool is empty or out of range".into()));
    }
    let empty = TrajRagStore::new(
        store.categories().to_vec(),
        store.params().clone(),
        store.config.clone(),
    )?;
    let mut scenes: BTreeMap<u64, Scene> = BTreeMap::new();
    for &s in scene_seeds {
        if let std::collections::btree_map::Entry::Vacant(e) = scenes.entry(s) {
            e.insert(generate_scene(s, params)?);
        }
    }

    struct Job {
        index: usize,
        setup: EpisodeSetup,
        start: AgentPose,
    }
    let mut jobs = Vec::with_capacity(episode_seeds.len());
    for (i, &episode_seed) in episode_seeds.iter().enumerate() {
        let scene_seed = scene_seeds[i % scene_seeds.len()];
        let scene = &scenes[&scene_seed];
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let goal = goal_pool[rng.gen_range(0..goal_pool.len())];
        let goal_cells = scene.goal_cells(goal);
        let start = sample_start(scene, &mut rng, &goal_cells, cfg.success_radius + 0.5)?;
        jobs.push(Job { index: i, setup: EpisodeSetup { episode_seed, scene_seed, goal }, start });
    }

    let run_one = |job: &Job,
                   snapshot: &TrajRagStore|
     -> Result<(EpisodeResult, EpisodeResult), SimError> {
        let scene = &scenes[&job.setup.scene_seed];
        let mut guided = HeuristicPlanner;
        let g = run_episode(scene, job.start, job.setup.goal, &mut guided, snapshot, cfg)?;
        let mut baseline =
            RandomFrontierPlanner::new(job.setup.episode_seed ^ 0x9E3779B97F4A7C15);
        let b = run_episode(scene, job.start, job.setup.goal, &mut baseline, &empty, cfg)?;
        Ok((g, b))
    };

    let threads = threads.max(1);
    let round = scene_seeds.len();
    let mut guided_store = store.clone();
    let mut consolidated = 0usize;
    let mut guided_results: Vec<Option<EpisodeResult>> =
        (0..jobs.len()).map(|_| None).collect();
    let mut baseline_results: Vec<Option<EpisodeResult>> =
        (0..jobs.len()).map(|_| None).collect();
    for batch in jobs.chunks(round) {
        let workers = threads.min(batch.len());
        if workers == 1 {
            for job in batch {
                let (g, b) = run_one(job, &guided_store)?;
                guided_results[job.index] = Some(g);
                baseline_results[job.index] = Some(b);
            }
        } else {
            let gathered: Vec<Vec<(usize, Result<(EpisodeResult, EpisodeResult), SimError>)>> =
                std::thread::scope(|scope| {
                    let mut handles = Vec::with_capacity(workers);
                    for worker in 0..workers {
                        let run_one = &run_one;
                        let snapshot = &guided_store;
                        handles.push(scope.spawn(move || {
                            batch
                                .iter()
                                .skip(worker)
                                .step_by(workers)
                                .map(|job| (job.index, run_one(job, snapshot)))
                                .collect()
                        }));
                    }
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("evaluation worker panicked"))
                        .collect()
                });
            for (index, result) in gathered.into_iter().flatten() {
                let (g, b) = result?;
                guided_results[index] = Some(g);
                baseline_results[index] = Some(b);
            }
        }
        for job in batch {
            let done = guided_results[job.index].as_ref().expect("episode ran");
            if let Some(t) = &done.trajectory {
                if guided_store.insert_trajectory(t).is_ok() {
                    consolidated += 1;
                }
            }
        }
    }
    let guided_results: Vec<EpisodeResult> =
        guided_results.into_iter().map(|r| r.expect("episode ran")).collect();
    let baseline_results: Vec<EpisodeResult> =
        baseline_results.into_iter().map(|r| r.expect("episode ran")).collect();
    Ok(PairedOutcome {
        guided: compute_metrics(&guided_results)?,
        baseline: compute_metrics(&baseline_results)?,
        setups: jobs.into_iter().map(|j| j.setup).collect(),
        guided_results,
        baseline_results,
        consolidated,
    })
}
