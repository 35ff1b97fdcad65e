//! Semantic occupancy grids.
//!
//! A [`SemanticMap`] stacks boolean channels over one grid: `obstacle`,
//! `explored`, and one channel per semantic category. On top of it this
//! module provides the three geometric primitives the rest of the crate is
//! built from: disc dilation of a channel, polar ray sampling into 30-degree
//! sector labels, and frontier extraction (free cells bordering unexplored
//! space).

use crate::geom::{Cell, Point};
use crate::textio::{tokens, LineCursor, TextError};
use thiserror::Error;

/// Number of polar sectors in a sector vector; each spans 30 degrees.
pub const SECTOR_COUNT: usize = 12;

/// Angular width of one sector, in radians.
pub const SECTOR_ANGLE: f64 = 2.0 * std::f64::consts::PI / SECTOR_COUNT as f64;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unknown channel: {0}")]
    UnknownChannel(String),
    #[error("point ({0}, {1}) is outside the grid")]
    OutOfBounds(f64, f64),
    #[error("cell ({0}, {1}) is outside the grid")]
    CellOutOfBounds(i32, i32),
    #[error("map invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Text(#[from] TextError),
}

// ============================================================================
// Masks
// ============================================================================

/// A boolean grid channel. Keeps a running count of set cells so emptiness
/// and growth checks stay O(1).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    set_count: usize,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask { width, height, bits: vec![false; (width as usize) * (height as usize)], set_count: 0 }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    fn idx(&self, x: i32, y: i32) -> Option<usize> {
        if x < 0 || y < 0 || x >= self.width as i32 || y >= self.height as i32 {
            None
        } else {
            Some(y as usize * self.width as usize + x as usize)
        }
    }

    /// Out-of-bounds reads return `false`.
    pub fn get(&self, x: i32, y: i32) -> bool {
        self.idx(x, y).map(|i| self.bits[i]).unwrap_or(false)
    }

    /// Out-of-bounds writes are ignored.
    pub fn set(&mut self, x: i32, y: i32, value: bool) {
        if let Some(i) = self.idx(x, y) {
            match (self.bits[i], value) {
                (false, true) => self.set_count += 1,
                (true, false) => self.set_count -= 1,
                _ => {}
            }
            self.bits[i] = value;
        }
    }

    pub fn set_count(&self) -> usize {
        self.set_count
    }

    pub fn any(&self) -> bool {
        self.set_count > 0
    }

    /// Set cells in raster order (row by row, column within row).
    pub fn iter_set(&self) -> impl Iterator<Item = Cell> + '_ {
        let w = self.width as i32;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| Cell::new(i as i32 % w, i as i32 / w))
    }

    /// Morphological dilation by a disc: the output sets every cell whose
    /// center lies within `radius` cells (Euclidean) of a set input cell.
    /// Radius 0 is the identity.
    pub fn dilate(&self, radius: u32) -> Mask {
        if radius == 0 || self.set_count == 0 {
            return self.clone();
        }
        let r = radius as i32;
        let r2 = r * r;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r2 {
                    offsets.push((dx, dy));
                }
            }
        }
        let mut out = Mask::new(self.width, self.height);
        for cell in self.iter_set() {
            for &(dx, dy) in &offsets {
                out.set(cell.x + dx, cell.y + dy, true);
            }
        }
        out
    }
}

// ============================================================================
// Sector labels
// ============================================================================

/// What a polar ray sees first along one sector direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SectorLabel {
    /// Nothing non-free within sampling range.
    Free,
    /// A wall or other unlabeled occupied cell.
    Obstacle,
    /// The edge of explored space.
    Unknown,
    /// A semantic category, by index into the map's category list.
    Category(u16),
}

impl SectorLabel {
    /// Compact token used by the text formats: `f`, `o`, `u`, `c<idx>`.
    pub fn token(&self) -> String {
        match self {
            SectorLabel::Free => "f".to_string(),
            SectorLabel::Obstacle => "o".to_string(),
            SectorLabel::Unknown => "u".to_string(),
            SectorLabel::Category(c) => format!("c{c}"),
        }
    }

    pub fn from_token(tok: &str) -> Option<SectorLabel> {
        match tok {
            "f" => Some(SectorLabel::Free),
            "o" => Some(SectorLabel::Obstacle),
            "u" => Some(SectorLabel::Unknown),
            _ => tok.strip_prefix('c').and_then(|rest| rest.parse().ok().map(SectorLabel::Category)),
        }
    }
}

/// The 12-sector polar fingerprint of one location. Sector `k` is sampled by
/// a single ray at angle `k * 30` degrees counterclockwise from map-frame
/// east (sector 0 always points east).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SectorVector(pub [SectorLabel; SECTOR_COUNT]);

impl SectorVector {
    pub fn uniform(label: SectorLabel) -> Self {
        SectorVector([label; SECTOR_COUNT])
    }

    pub fn get(&self, k: usize) -> SectorLabel {
        self.0[k]
    }

    pub fn tokens(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|l| l.token()).collect();
        parts.join(" ")
    }
}

// ============================================================================
// Semantic map
// ============================================================================

/// Identifies one channel of a [`SemanticMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelId {
    Obstacle,
    Explored,
    /// Semantic channel by category index.
    Semantic(u16),
}

/// A grid of square cells with obstacle, explored, and per-category semantic
/// channels.
///
/// Geometry: `origin` is the world coordinate of the *center* of cell (0, 0);
/// cell (x, y) is centered at `origin + (x, y) * resolution`. World-to-cell
/// lookups round to the nearest cell center.
///
/// Channel invariants for observation-built maps: obstacle and semantic cells
/// are always explored. Dilated scratch copies used for sampling may spill
/// semantic marks past the explored boundary; the sampler accounts for that.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    width: u32,
    height: u32,
    resolution: f64,
    origin: Point,
    categories: Vec<String>,
    obstacle: Mask,
    explored: Mask,
    semantic: Vec<Mask>,
}

impl SemanticMap {
    pub fn new(width: u32, height: u32, resolution: f64, origin: Point, categories: Vec<String>) -> Self {
        let semantic = (0..categories.len()).map(|_| Mask::new(width, height)).collect();
        SemanticMap {
            width,
            height,
            resolution,
            origin,
            categories,
            obstacle: Mask::new(width, height),
            explored: Mask::new(width, height),
            semantic,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_index(&self, name: &str) -> Option<u16> {
        self.categories.iter().position(|c| c == name).map(|i| i as u16)
    }

    pub fn channel(&self, id: ChannelId) -> Result<&Mask, GridError> {
        match id {
            ChannelId::Obstacle => Ok(&self.obstacle),
            ChannelId::Explored => Ok(&self.explored),
            ChannelId::Semantic(c) => {
                self.semantic.get(c as usize).ok_or_else(|| GridError::UnknownChannel(format!("cat{c}")))
            }
        }
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.x >= 0 && cell.y >= 0 && cell.x < self.width as i32 && cell.y < self.height as i32
    }

    /// Nearest cell to a world point, or `None` when the point falls outside
    /// the grid.
    pub fn world_to_cell(&self, p: Point) -> Option<Cell> {
        let x = ((p.x - self.origin.x) / self.resolution).round();
        let y = ((p.y - self.origin.y) / self.resolution).round();
        if !x.is_finite() || !y.is_finite() {
            return None;
        }
        let cell = Cell::new(x as i32, y as i32);
        if self.in_bounds(cell) {
            Some(cell)
        } else {
            None
        }
    }

    /// World coordinate of a cell center.
    pub fn cell_center(&self, cell: Cell) -> Point {
        Point::new(
            self.origin.x + f64::from(cell.x) * self.resolution,
            self.origin.y + f64::from(cell.y) * self.resolution,
        )
    }

    /// Explored and not an obstacle. Out-of-bounds cells are not free.
    pub fn is_free(&self, x: i32, y: i32) -> bool {
        self.explored.get(x, y) && !self.obstacle.get(x, y)
    }

    pub fn is_explored(&self, x: i32, y: i32) -> bool {
        self.explored.get(x, y)
    }

    pub fn is_obstacle(&self, x: i32, y: i32) -> bool {
        self.obstacle.get(x, y)
    }

    /// Marks a cell explored.
    pub fn mark_explored(&mut self, cell: Cell) {
        self.explored.set(cell.x, cell.y, true);
    }

    /// Marks a cell as an obstacle (and therefore explored).
    pub fn mark_obstacle(&mut self, cell: Cell) {
        self.obstacle.set(cell.x, cell.y, true);
        self.explored.set(cell.x, cell.y, true);
    }

    /// Marks a semantic category on a cell (and therefore explored).
    pub fn mark_category(&mut self, cell: Cell, category: u16) -> Result<(), GridError> {
        let mask = self
            .semantic
            .get_mut(category as usize)
            .ok_or_else(|| GridError::UnknownChannel(format!("cat{category}")))?;
        mask.set(cell.x, cell.y, true);
        self.explored.set(cell.x, cell.y, true);
        Ok(())
    }

    /// Mask of free cells (explored and not obstacle).
    pub fn free_mask(&self) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for cell in self.explored.iter_set() {
            if !self.obstacle.get(cell.x, cell.y) {
                out.set(cell.x, cell.y, true);
            }
        }
        out
    }

    pub fn explored_count(&self) -> usize {
        self.explored.set_count()
    }

    pub fn semantic_count(&self, category: u16) -> usize {
        self.semantic.get(category as usize).map(|m| m.set_count()).unwrap_or(0)
    }

    /// Returns a copy with one channel replaced by its disc dilation.
    /// Marking channels never un-explores cells, so dilating `explored`
    /// widens it; dilating obstacle or semantic channels can spill past the
    /// explored boundary, which is why dilation is only applied to scratch
    /// copies at sampling time, never to the stored map.
    pub fn dilate_channel(&self, id: ChannelId, radius: u32) -> Result<SemanticMap, GridError> {
        let mut out = self.clone();
        match id {
            ChannelId::Obstacle => out.obstacle = self.obstacle.dilate(radius),
            ChannelId::Explored => out.explored = self.explored.dilate(radius),
            ChannelId::Semantic(c) => {
                let mask = self
                    .semantic
                    .get(c as usize)
                    .ok_or_else(|| GridError::UnknownChannel(format!("cat{c}")))?;
                out.semantic[c as usize] = mask.dilate(radius);
            }
        }
        Ok(out)
    }

    /// Checks the channel containment invariants (obstacle and semantic cells
    /// explored, all channels same shape).
    pub fn validate(&self) -> Result<(), GridError> {
        for cell in self.obstacle.iter_set() {
            if !self.explored.get(cell.x, cell.y) {
                return Err(GridError::Invariant(format!("obstacle cell ({}, {}) not explored", cell.x, cell.y)));
            }
        }
        for (c, mask) in self.semantic.iter().enumerate() {
            for cell in mask.iter_set() {
                if !self.explored.get(cell.x, cell.y) {
                    return Err(GridError::Invariant(format!(
                        "semantic cell ({}, {}) of cat{c} not explored",
                        cell.x, cell.y
                    )));
                }
            }
        }
        if !self.resolution.is_finite() || self.resolution <= 0.0 {
            return Err(GridError::Invariant(format!("non-positive resolution {}", self.resolution)));
        }
        Ok(())
    }
}

// ============================================================================
// Polar sampling
// ============================================================================

/// Ray sampler over a map whose semantic channels have been disc-dilated onto
/// a scratch copy. Dilation absorbs the one-or-two-cell misregistration
/// between runs so thin objects are not missed by rays that pass one cell to
/// the side; the map handed in stays untouched.
pub struct PolarSampler<'a> {
    map: &'a SemanticMap,
    dilated_semantic: Vec<Mask>,
}

impl<'a> PolarSampler<'a> {
    pub fn new(map: &'a SemanticMap, dilation_radius: u32) -> Self {
        let dilated_semantic = map.semantic.iter().map(|m| m.dilate(dilation_radius)).collect();
        PolarSampler { map, dilated_semantic }
    }

    /// Classifies one grid cell for ray purposes. Order matters: unexplored
    /// wins over dilation spill, then the lowest semantic category, then
    /// obstacle.
    fn classify(&self, x: i32, y: i32) -> SectorLabel {
        if !self.map.explored.get(x, y) {
            return SectorLabel::Unknown;
        }
        for (c, mask) in self.dilated_semantic.iter().enumerate() {
            if mask.get(x, y) {
                return SectorLabel::Category(c as u16);
            }
        }
        if self.map.obstacle.get(x, y) {
            return SectorLabel::Obstacle;
        }
        SectorLabel::Free
    }

    /// Walks a ray from `center` along `theta` in half-cell increments
    /// (starting at the center cell itself) and returns the label of the
    /// first non-free cell within `range_m` meters, or `Free` if the whole
    /// ray stays clear. Leaving the grid counts as hitting unknown space.
    pub fn cast_ray(&self, center: Point, theta: f64, range_m: f64) -> Result<SectorLabel, GridError> {
        if self.map.world_to_cell(center).is_none() {
            return Err(GridError::OutOfBounds(center.x, center.y));
        }
        let step = self.map.resolution * 0.5;
        let steps = (range_m / step).floor() as i64;
        let (dx, dy) = (theta.cos(), theta.sin());
        for i in 0..=steps {
            let t = step * i as f64;
            let p = Point::new(center.x + t * dx, center.y + t * dy);
            let cell = match self.map.world_to_cell(p) {
                Some(c) => c,
                None => return Ok(SectorLabel::Unknown),
            };
            let label = self.classify(cell.x, cell.y);
            if label != SectorLabel::Free {
                return Ok(label);
            }
        }
        Ok(SectorLabel::Free)
    }

    /// Casts the 12 sector rays (sector k at k * 30 degrees from east,
    /// counterclockwise).
    pub fn sector_vector(&self, center: Point, range_m: f64) -> Result<SectorVector, GridError> {
        let mut labels = [SectorLabel::Free; SECTOR_COUNT];
        for (k, slot) in labels.iter_mut().enumerate() {
            *slot = self.cast_ray(center, k as f64 * SECTOR_ANGLE, range_m)?;
        }
        Ok(SectorVector(labels))
    }
}

// ============================================================================
// Frontiers
// ============================================================================

/// A connected region of free cells that touch unexplored space.
#[derive(Debug, Clone, PartialEq)]
pub struct Frontier {
    /// Member cells, sorted by (row, column).
    pub cells: Vec<Cell>,
    /// Mean of member cell centers, in world coordinates.
    pub centroid: Point,
    pub size: usize,
    /// Polar fingerprint sampled at the centroid.
    pub sector_vector: SectorVector,
}

/// True when the cell is free and 8-adjacent to at least one unexplored cell.
fn is_frontier_cell(map: &SemanticMap, x: i32, y: i32) -> bool {
    if !map.is_free(x, y) {
        return false;
    }
    for dy in -1..=1 {
        for dx in -1..=1 {
            if (dx != 0 || dy != 0) && !map.explored.get(x + dx, y + dy) && map.in_bounds(Cell::new(x + dx, y + dy))
            {
                return true;
            }
        }
    }
    false
}

/// Extracts 8-connected frontier components of at least `min_size` cells,
/// ordered by their first cell in raster order. Each component carries a
/// sector vector sampled at its centroid with the given sampler.
pub fn extract_frontiers(
    map: &SemanticMap,
    min_size: usize,
    sampler: &PolarSampler,
    range_m: f64,
) -> Vec<Frontier> {
    let w = map.width as i32;
    let h = map.height as i32;
    let mut frontier = Mask::new(map.width, map.height);
    for y in 0..h {
        for x in 0..w {
            if is_frontier_cell(map, x, y) {
                frontier.set(x, y, true);
            }
        }
    }
    let mut seen = Mask::new(map.width, map.height);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !frontier.get(x, y) || seen.get(x, y) {
                continue;
            }
            // BFS over 8-connected frontier cells.
            let mut cells = Vec::new();
            let mut queue = std::collections::VecDeque::new();
            queue.push_back(Cell::new(x, y));
            seen.set(x, y, true);
            while let Some(c) = queue.pop_front() {
                cells.push(c);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (c.x + dx, c.y + dy);
                        if (dx != 0 || dy != 0) && frontier.get(nx, ny) && !seen.get(nx, ny) {
                            seen.set(nx, ny, true);
                            queue.push_back(Cell::new(nx, ny));
                        }
                    }
                }
            }
            if cells.len() < min_size {
                continue;
            }
            cells.sort();
            let mut cx = 0.0;
            let mut cy = 0.0;
            for c in &cells {
                let p = map.cell_center(*c);
                cx += p.x;
                cy += p.y;
            }
            let centroid = Point::new(cx / cells.len() as f64, cy / cells.len() as f64);
            // The centroid of in-bounds cells is always on the grid.
            let sector_vector = sampler
                .sector_vector(centroid, range_m)
                .expect("frontier centroid lies inside the grid");
            out.push(Frontier { size: cells.len(), cells, centroid, sector_vector });
        }
    }
    out
}

// ============================================================================
// Text serialization
// ============================================================================

const MAP_HEADER: &str = "semmap v1";

fn mask_to_rle(mask: &Mask) -> String {
    let mut runs: Vec<usize> = Vec::new();
    let mut current = false; // first run counts zeros
    let mut len = 0usize;
    for b in &mask.bits {
        if *b == current {
            len += 1;
        } else {
            runs.push(len);
            current = *b;
            len = 1;
        }
    }
    runs.push(len);
    if runs == [0] {
        // Zero-area grid: emit no runs at all.
        runs.clear();
    }
    let parts: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
    if parts.is_empty() {
        "rle".to_string()
    } else {
        format!("rle {}", parts.join(" "))
    }
}

fn mask_from_rle(width: u32, height: u32, rest: &str, line: usize) -> Result<Mask, TextError> {
    let mut mask = Mask::new(width, height);
    let total = width as usize * height as usize;
    let mut pos = 0usize;
    let mut value = false;
    for tok in tokens(rest) {
        let run: usize =
            tok.parse().map_err(|_| TextError::at(line, format!("invalid run length: `{tok}`")))?;
        if value {
            for i in pos..pos.saturating_add(run).min(total) {
                let x = (i % width as usize) as i32;
                let y = (i / width as usize) as i32;
                mask.set(x, y, true);
            }
        }
        pos = pos.saturating_add(run);
        value = !value;
    }
    if pos != total {
        return Err(TextError::at(line, format!("run lengths sum to {pos}, expected {total}")));
    }
    Ok(mask)
}

impl SemanticMap {
    /// Serializes the map to its text form: a header block followed by one
    /// run-length-encoded line per channel. Floats use the shortest
    /// representation that parses back to the identical value, so a
    /// round-trip is bit-exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAP_HEADER);
        out.push('\n');
        out.push_str(&format!("size {} {}\n", self.width, self.height));
        out.push_str(&format!("resolution {}\n", self.resolution));
        out.push_str(&format!("origin {} {}\n", self.origin.x, self.origin.y));
        if self.categories.is_empty() {
            out.push_str("categories\n");
        } else {
            out.push_str(&format!("categories {}\n", self.categories.join(" ")));
        }
        out.push_str("channel obstacle\n");
        out.push_str(&mask_to_rle(&self.obstacle));
        out.push('\n');
        out.push_str("channel explored\n");
        out.push_str(&mask_to_rle(&self.explored));
        out.push('\n');
        for (c, mask) in self.semantic.iter().enumerate() {
            out.push_str(&format!("channel cat{c}\n"));
            out.push_str(&mask_to_rle(mask));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<SemanticMap, GridError> {
        let mut cur = LineCursor::new(text);
        let map = Self::parse_block(&mut cur)?;
        Ok(map)
    }

    /// Parses one `semmap` block from an open cursor (scene files append
    /// their own block after the map).
    pub(crate) fn parse_block(cur: &mut LineCursor) -> Result<SemanticMap, GridError> {
        cur.expect(MAP_HEADER)?;
        let size = cur.expect_key("size")?;
        let toks = tokens(size);
        if toks.len() != 2 {
            return Err(TextError::at(cur.line_no(), "size expects `size <w> <h>`").into());
        }
        let width: u32 = cur.parse_one(toks[0], "width")?;
        let height: u32 = cur.parse_one(toks[1], "height")?;
        let res_s = cur.expect_key("resolution")?;
        let resolution: f64 = cur.parse_one(res_s.trim(), "resolution")?;
        let origin_s = cur.expect_key("origin")?;
        let otoks = tokens(origin_s);
        if otoks.len() != 2 {
            return Err(TextError::at(cur.line_no(), "origin expects `origin <x> <y>`").into());
        }
        let origin = Point::new(cur.parse_one(otoks[0], "origin x")?, cur.parse_one(otoks[1], "origin y")?);
        let cats_s = cur.expect_key("categories")?;
        let categories: Vec<String> = tokens(cats_s).into_iter().map(String::from).collect();
        let n_cat = categories.len();
        let mut map = SemanticMap::new(width, height, resolution, origin, categories);

        fn read_channel(
            cur: &mut LineCursor,
            name: &str,
            width: u32,
            height: u32,
        ) -> Result<Mask, GridError> {
            cur.expect(&format!("channel {name}"))?;
            let rle = cur.expect_key("rle")?;
            Ok(mask_from_rle(width, height, rle, cur.line_no())?)
        }

        map.obstacle = read_channel(cur, "obstacle", width, height)?;
        map.explored = read_channel(cur, "explored", width, height)?;
        for c in 0..n_cat {
            map.semantic[c] = read_channel(cur, &format!("cat{c}"), width, height)?;
        }
        cur.expect("end")?;
        map.validate()?;
        Ok(map)
    }
}
