//! Planar geometry shared by map preparation, rasterization, and metrics.
//!
//! Coordinates are meters in the ego frame: x forward, y left.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point { x: self.x + t * (other.x - self.x), y: self.y + t * (other.y - self.y) }
    }
}

/// Axis-aligned map window; cells tile it half-open from the min corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Window {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Option<Self> {
        if x_max > x_min && y_max > y_min {
            Some(Window { x_min, x_max, y_min, y_max })
        } else {
            None
        }
    }

    /// Containment in the closed window, with slack for clipped endpoints.
    pub fn contains(&self, p: &Point, tol: f64) -> bool {
        p.x >= self.x_min - tol
            && p.x <= self.x_max + tol
            && p.y >= self.y_min - tol
            && p.y <= self.y_max + tol
    }

    pub fn width_x(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn width_y(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// A window discretized into square cells. Row index follows x (forward),
/// column index follows y (left): row = floor((x - x_min) / cell).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub window: Window,
    pub cell: f64,
}

impl GridSpec {
    pub fn new(window: Window, cell: f64) -> Self {
        GridSpec { window, cell }
    }

    /// Default 0.5 m cells.
    pub fn with_default_cell(window: Window) -> Self {
        GridSpec { window, cell: 0.5 }
    }

    pub fn rows(&self) -> usize {
        (self.window.width_x() / self.cell).round() as usize
    }

    pub fn cols(&self) -> usize {
        (self.window.width_y() / self.cell).round() as usize
    }

    /// Continuous cell coordinates of a point (row axis, col axis).
    pub fn grid_coord(&self, p: &Point) -> (f64, f64) {
        ((p.x - self.window.x_min) / self.cell, (p.y - self.window.y_min) / self.cell)
    }

    /// Cell containing `p` under half-open cell squares, if inside the grid.
    pub fn cell_of(&self, p: &Point) -> Option<(usize, usize)> {
        let (u, v) = self.grid_coord(p);
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (r, c) = (u.floor() as usize, v.floor() as usize);
        if r < self.rows() && c < self.cols() {
            Some((r, c))
        } else {
            None
        }
    }

    /// Center of cell (r, c) in meters.
    pub fn cell_center(&self, r: usize, c: usize) -> Point {
        Point {
            x: self.window.x_min + (r as f64 + 0.5) * self.cell,
            y: self.window.y_min + (c as f64 + 0.5) * self.cell,
        }
    }
}

pub fn arc_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| w[0].dist(&w[1])).sum()
}

/// Liang-Barsky clip of the parametric segment p0 + t (p1 - p0), t in [0, 1],
/// against a closed box. Returns the surviving parameter interval.
pub fn clip_segment_params(
    p0: &Point,
    p1: &Point,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
) -> Option<(f64, f64)> {
    let dx = p1.x - p0.x;
    let dy = p1.y - p0.y;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    let checks = [
        (-dx, p0.x - x_min),
        (dx, x_max - p0.x),
        (-dy, p0.y - y_min),
        (dy, y_max - p0.y),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                if r > t1 {
                    return None;
                }
                if r > t0 {
                    t0 = r;
                }
            } else {
                if r < t0 {
                    return None;
                }
                if r < t1 {
                    t1 = r;
                }
            }
        }
    }
    if t0 <= t1 {
        Some((t0, t1))
    } else {
        None
    }
}

/// Intersection of two segments. With `proper`, only crossings interior to
/// both segments count; touching endpoints do not.
pub fn segment_intersection(
    a0: &Point,
    a1: &Point,
    b0: &Point,
    b1: &Point,
    proper: bool,
) -> Option<Point> {
    let r = Point::new(a1.x - a0.x, a1.y - a0.y);
    let s = Point::new(b1.x - b0.x, b1.y - b0.y);
    let denom = r.x * s.y - r.y * s.x;
    if denom == 0.0 {
        return None; // parallel or collinear
    }
    let qp = Point::new(b0.x - a0.x, b0.y - a0.y);
    let t = (qp.x * s.y - qp.y * s.x) / denom;
    let u = (qp.x * r.y - qp.y * r.x) / denom;
    let inside = if proper {
        t > 0.0 && t < 1.0 && u > 0.0 && u < 1.0
    } else {
        (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)
    };
    if inside {
        Some(a0.lerp(a1, t))
    } else {
        None
    }
}

/// Minimum distance from a point to a segment.
pub fn point_segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let abx = b.x - a.x;
    let aby = b.y - a.y;
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0);
    p.dist(&a.lerp(b, t))
}
