//! Small shared geometry vocabulary: world points in meters, integer grid
//! cells, and angle helpers used by the sampling, matching, and control code.

use serde::{Deserialize, Serialize};

/// A position in world coordinates, in meters. The world frame is the usual
/// mathematical one: x grows to the east, y to the north, angles are measured
/// counterclockwise from east.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Integer grid coordinates: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

/// Cells order in raster fashion: by row, then by column. Every scan in the
/// crate that needs a deterministic cell order relies on this.
impl Ord for Cell {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    /// Euclidean distance between cell centers, in cells.
    pub fn distance(&self, other: &Cell) -> f64 {
        (f64::from(self.x - other.x)).hypot(f64::from(self.y - other.y))
    }
}

/// Wraps an angle into the half-open interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = a % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}
