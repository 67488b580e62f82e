//! Scene files and ego-frame SD-map preparation.
//!
//! A scene file is a UTF-8 JSON document:
//!
//! ```json
//! {
//!   "id": "scene_0001",
//!   "window": [x_min, x_max, y_min, y_max],
//!   "sd_polylines": [{"category": "road", "points": [[x, y], ...]}, ...],
//!   "lanes": [{"id": 0, "centerline": [[x, y], ...]}, ...],
//!   "adjacency": [[0, 1, ...], ...],
//!   "occlusion": {"rects": [[x0, y0, x1, y1], ...]}
//! }
//! ```
//!
//! Numbers are meters in the ego frame. Unknown keys are ignored; category
//! strings are matched case-sensitively.

use crate::geom::{arc_length, clip_segment_params, GridSpec, Point, Window};
use crate::metrics::{Lane, LaneGraph};
use crate::rng::SplitMix64;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("missing required field {0}")]
    MissingField(String),
    #[error("field {field} should be {expected}")]
    WrongType { field: String, expected: &'static str },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("polyline {index} has fewer than 2 points")]
    TooFewPoints { index: usize },
    #[error("polyline {index} repeats a point beyond 1e-9 m")]
    DuplicatePoint { index: usize },
    #[error("point ({x}, {y}) outside declared window")]
    PointOutsideWindow { x: f64, y: f64 },
    #[error("window extents must be positive")]
    BadWindow,
    #[error("adjacency must be {lanes}x{lanes} to match the lane count, got {rows} rows")]
    AdjacencyOrder { lanes: usize, rows: usize },
    #[error("adjacency entries must be 0 or 1 with zero diagonal")]
    AdjacencyValue,
    #[error("cannot resample a zero-length polyline")]
    DegenerateResample,
    #[error("resample needs n >= 2, got {0}")]
    ResampleTooFew(usize),
}

/// SD-map polyline category. The three channels of the raster follow this
/// order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Road,
    Crosswalk,
    Sidewalk,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Road, Category::Crosswalk, Category::Sidewalk];

    pub fn parse(s: &str) -> Result<Self, SceneError> {
        match s {
            "road" => Ok(Category::Road),
            "crosswalk" => Ok(Category::Crosswalk),
            "sidewalk" => Ok(Category::Sidewalk),
            other => Err(SceneError::UnknownCategory(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Road => "road",
            Category::Crosswalk => "crosswalk",
            Category::Sidewalk => "sidewalk",
        }
    }

    pub fn channel(&self) -> usize {
        match self {
            Category::Road => 0,
            Category::Crosswalk => 1,
            Category::Sidewalk => 2,
        }
    }
}

/// Ordered point sequence with a category. At least two points; consecutive
/// points differ by more than 1e-9 m.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub category: Category,
    pub points: Vec<Point>,
}

impl Polyline {
    pub fn new(category: Category, points: Vec<Point>) -> Result<Self, SceneError> {
        Self::validated(category, points, usize::MAX)
    }

    fn validated(category: Category, points: Vec<Point>, index: usize) -> Result<Self, SceneError> {
        if points.len() < 2 {
            return Err(SceneError::TooFewPoints { index });
        }
        if points.windows(2).any(|w| w[0].dist(&w[1]) <= 1e-9) {
            return Err(SceneError::DuplicatePoint { index });
        }
        Ok(Polyline { category, points })
    }
}

/// The ego-frame SD map: polylines clipped to a window.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalMap {
    pub polylines: Vec<Polyline>,
    pub window: Window,
}

/// Axis-aligned occlusion rectangle in meters, normalized so x0 <= x1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn normalized(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0: x0.min(x1), y0: y0.min(y1), x1: x0.max(x1), y1: y0.max(y1) }
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
}

/// One evaluation unit: ground-truth lane graph, SD map, occlusion.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub sd_map: LocalMap,
    pub lane_graph: LaneGraph,
    pub occlusion: Vec<Rect>,
}

impl Scene {
    /// Boolean occlusion mask at a grid resolution; a cell is occluded when
    /// its center falls inside any occlusion rectangle.
    pub fn occlusion_mask(&self, grid: &GridSpec) -> Vec<bool> {
        let (rows, cols) = (grid.rows(), grid.cols());
        let mut mask = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let center = grid.cell_center(r, c);
                if self.occlusion.iter().any(|rect| rect.contains(&center)) {
                    mask[r * cols + c] = true;
                }
            }
        }
        mask
    }
}

// ── parsing ──────────────────────────────────────────────────────────

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Result<&'a Value, SceneError> {
    obj.get(name).ok_or_else(|| SceneError::MissingField(name.to_string()))
}

fn as_f64(v: &Value, field: &str) -> Result<f64, SceneError> {
    v.as_f64().ok_or(SceneError::WrongType { field: field.to_string(), expected: "a number" })
}

fn parse_points(v: &Value, field_name: &str) -> Result<Vec<Point>, SceneError> {
    let arr = v
        .as_array()
        .ok_or(SceneError::WrongType { field: field_name.to_string(), expected: "an array of [x, y] pairs" })?;
    let mut points = Vec::with_capacity(arr.len());
    for item in arr {
        let pair = item.as_array().filter(|p| p.len() == 2).ok_or(SceneError::WrongType {
            field: field_name.to_string(),
            expected: "an array of [x, y] pairs",
        })?;
        points.push(Point::new(as_f64(&pair[0], field_name)?, as_f64(&pair[1], field_name)?));
    }
    Ok(points)
}

fn check_inside(points: &[Point], window: &Window) -> Result<(), SceneError> {
    for p in points {
        if !window.contains(p, 1e-9) {
            return Err(SceneError::PointOutsideWindow { x: p.x, y: p.y });
        }
    }
    Ok(())
}

/// Parse and fully validate a scene document.
pub fn parse_scene(text: &str) -> Result<Scene, SceneError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SceneError::Json(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or(SceneError::WrongType { field: "document".into(), expected: "a JSON object" })?;

    let id = field(obj, "id")?
        .as_str()
        .ok_or(SceneError::WrongType { field: "id".into(), expected: "a string" })?
        .to_string();

    let win = field(obj, "window")?
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or(SceneError::WrongType { field: "window".into(), expected: "[x_min, x_max, y_min, y_max]" })?;
    let window = Window::new(
        as_f64(&win[0], "window")?,
        as_f64(&win[1], "window")?,
        as_f64(&win[2], "window")?,
        as_f64(&win[3], "window")?,
    )
    .ok_or(SceneError::BadWindow)?;

    let raw_polylines = field(obj, "sd_polylines")?
        .as_array()
        .ok_or(SceneError::WrongType { field: "sd_polylines".into(), expected: "an array" })?;
    let mut polylines = Vec::with_capacity(raw_polylines.len());
    for (index, raw) in raw_polylines.iter().enumerate() {
        let entry = raw
            .as_object()
            .ok_or(SceneError::WrongType { field: "sd_polylines".into(), expected: "objects" })?;
        let category = Category::parse(
            field(entry, "category")?
                .as_str()
                .ok_or(SceneError::WrongType { field: "category".into(), expected: "a string" })?,
        )?;
        let points = parse_points(field(entry, "points")?, "points")?;
        check_inside(&points, &window)?;
        polylines.push(Polyline::validated(category, points, index)?);
    }

    let raw_lanes = field(obj, "lanes")?
        .as_array()
        .ok_or(SceneError::WrongType { field: "lanes".into(), expected: "an array" })?;
    let mut lanes = Vec::with_capacity(raw_lanes.len());
    for raw in raw_lanes {
        let entry =
            raw.as_object().ok_or(SceneError::WrongType { field: "lanes".into(), expected: "objects" })?;
        let lane_id = field(entry, "id")?
            .as_i64()
            .ok_or(SceneError::WrongType { field: "lanes.id".into(), expected: "an integer" })?;
        let centerline = parse_points(field(entry, "centerline")?, "centerline")?;
        if centerline.len() < 2 {
            return Err(SceneError::TooFewPoints { index: lanes.len() });
        }
        check_inside(&centerline, &window)?;
        lanes.push(Lane { id: lane_id, centerline });
    }

    let raw_adj = field(obj, "adjacency")?
        .as_array()
        .ok_or(SceneError::WrongType { field: "adjacency".into(), expected: "a 0/1 matrix" })?;
    if raw_adj.len() != lanes.len() {
        return Err(SceneError::AdjacencyOrder { lanes: lanes.len(), rows: raw_adj.len() });
    }
    let n = lanes.len();
    let mut adjacency = vec![0u8; n * n];
    for (i, row) in raw_adj.iter().enumerate() {
        let row = row
            .as_array()
            .filter(|r| r.len() == n)
            .ok_or(SceneError::AdjacencyOrder { lanes: n, rows: raw_adj.len() })?;
        for (j, v) in row.iter().enumerate() {
            let bit = v.as_i64().ok_or(SceneError::AdjacencyValue)?;
            if bit != 0 && bit != 1 {
                return Err(SceneError::AdjacencyValue);
            }
            if i == j && bit != 0 {
                return Err(SceneError::AdjacencyValue);
            }
            adjacency[i * n + j] = bit as u8;
        }
    }

    let occl = field(obj, "occlusion")?
        .as_object()
        .ok_or(SceneError::WrongType { field: "occlusion".into(), expected: "an object" })?;
    let raw_rects = field(occl, "rects")?
        .as_array()
        .ok_or(SceneError::WrongType { field: "occlusion.rects".into(), expected: "an array" })?;
    let mut occlusion = Vec::with_capacity(raw_rects.len());
    for raw in raw_rects {
        let quad = raw.as_array().filter(|a| a.len() == 4).ok_or(SceneError::WrongType {
            field: "occlusion.rects".into(),
            expected: "[x0, y0, x1, y1] quads",
        })?;
        occlusion.push(Rect::normalized(
            as_f64(&quad[0], "occlusion.rects")?,
            as_f64(&quad[1], "occlusion.rects")?,
            as_f64(&quad[2], "occlusion.rects")?,
            as_f64(&quad[3], "occlusion.rects")?,
        ));
    }

    Ok(Scene {
        id,
        sd_map: LocalMap { polylines, window },
        lane_graph: LaneGraph::new(lanes, adjacency)
            .map_err(|_| SceneError::AdjacencyValue)?,
        occlusion,
    })
}

/// Serialize a scene back to the document format. `parse(serialize(parse(t)))`
/// recovers the same scene; floats print with round-trip precision.
pub fn serialize_scene(scene: &Scene) -> String {
    let points_json = |pts: &[Point]| -> Value {
        Value::Array(pts.iter().map(|p| json!([p.x, p.y])).collect())
    };
    let n = scene.lane_graph.len();
    let doc = json!({
        "id": scene.id,
        "window": [
            scene.sd_map.window.x_min,
            scene.sd_map.window.x_max,
            scene.sd_map.window.y_min,
            scene.sd_map.window.y_max,
        ],
        "sd_polylines": scene.sd_map.polylines.iter().map(|pl| json!({
            "category": pl.category.as_str(),
            "points": points_json(&pl.points),
        })).collect::<Vec<_>>(),
        "lanes": scene.lane_graph.lanes.iter().map(|lane| json!({
            "id": lane.id,
            "centerline": points_json(&lane.centerline),
        })).collect::<Vec<_>>(),
        "adjacency": (0..n).map(|i| {
            (0..n).map(|j| scene.lane_graph.adjacency[i * n + j]).collect::<Vec<_>>()
        }).collect::<Vec<_>>(),
        "occlusion": {
            "rects": scene.occlusion.iter().map(|r| json!([r.x0, r.y0, r.x1, r.y1])).collect::<Vec<_>>(),
        },
    });
    serde_json::to_string_pretty(&doc).expect("scene serialization cannot fail")
}

// ── ego-frame preparation ────────────────────────────────────────────

/// Ego pose in the map frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { x: 0.0, y: 0.0, heading: 0.0 }
    }

    /// Map-frame point expressed in the ego frame.
    fn to_ego(&self, p: &Point) -> Point {
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        let (sin, cos) = self.heading.sin_cos();
        Point { x: cos * dx + sin * dy, y: -sin * dx + cos * dy }
    }
}

/// Rotate/translate polylines into the ego frame and clip to the window.
///
/// Segments are clipped parametrically; a polyline that leaves the window and
/// comes back splits into two, and polylines fully outside are dropped.
pub fn crop_to_window(polylines: &[Polyline], pose: Pose, window: Window) -> LocalMap {
    let mut out = Vec::new();
    for pl in polylines {
        let pts: Vec<Point> = pl.points.iter().map(|p| pose.to_ego(p)).collect();
        let mut run: Vec<Point> = Vec::new();
        let flush = |run: &mut Vec<Point>, out: &mut Vec<Polyline>| {
            if run.len() >= 2 {
                out.push(Polyline { category: pl.category, points: std::mem::take(run) });
            } else {
                run.clear();
            }
        };
        for seg in pts.windows(2) {
            let clipped = clip_segment_params(
                &seg[0],
                &seg[1],
                window.x_min,
                window.x_max,
                window.y_min,
                window.y_max,
            );
            let Some((t0, t1)) = clipped else {
                flush(&mut run, &mut out);
                continue;
            };
            let snap = |p: Point| Point {
                x: p.x.clamp(window.x_min, window.x_max),
                y: p.y.clamp(window.y_min, window.y_max),
            };
            let q0 = if t0 == 0.0 { seg[0] } else { snap(seg[0].lerp(&seg[1], t0)) };
            let q1 = if t1 == 1.0 { seg[1] } else { snap(seg[0].lerp(&seg[1], t1)) };
            if t0 > 0.0 {
                flush(&mut run, &mut out);
            }
            if run.is_empty() {
                run.push(q0);
            }
            if q1.dist(run.last().unwrap()) > 1e-9 {
                run.push(q1);
            }
            if t1 < 1.0 {
                flush(&mut run, &mut out);
            }
        }
        flush(&mut run, &mut out);
    }
    LocalMap { polylines: out, window }
}

/// Resample a polyline to `n` points uniformly spaced in arc length.
/// Endpoints are preserved exactly.
pub fn resample_polyline(points: &[Point], n: usize) -> Result<Vec<Point>, SceneError> {
    if n < 2 {
        return Err(SceneError::ResampleTooFew(n));
    }
    if points.len() < 2 {
        return Err(SceneError::DegenerateResample);
    }
    let total = arc_length(points);
    if total <= 0.0 {
        return Err(SceneError::DegenerateResample);
    }
    let mut out = Vec::with_capacity(n);
    out.push(points[0]);
    let mut seg_ix = 0;
    let mut seg_start_arc = 0.0;
    let mut seg_len = points[0].dist(&points[1]);
    for k in 1..n - 1 {
        let target = total * k as f64 / (n - 1) as f64;
        while seg_start_arc + seg_len < target && seg_ix + 2 < points.len() {
            seg_start_arc += seg_len;
            seg_ix += 1;
            seg_len = points[seg_ix].dist(&points[seg_ix + 1]);
        }
        let t = if seg_len > 0.0 { (target - seg_start_arc) / seg_len } else { 0.0 };
        out.push(points[seg_ix].lerp(&points[seg_ix + 1], t.clamp(0.0, 1.0)));
    }
    out.push(*points.last().unwrap());
    Ok(out)
}

/// Apply one rigid GPS-style misalignment to a whole map and re-clip.
///
/// Translation is N(0, sigma_t^2) per axis and rotation N(0, sigma_theta^2);
/// draws come in the order (tx, ty, theta), so outputs are bit-reproducible
/// per seed.
pub fn perturb(map: &LocalMap, seed: u64, sigma_t: f64, sigma_theta: f64) -> LocalMap {
    let mut rng = SplitMix64::new(seed);
    let tx = sigma_t * rng.next_gaussian();
    let ty = sigma_t * rng.next_gaussian();
    let theta = sigma_theta * rng.next_gaussian();
    let (sin, cos) = theta.sin_cos();
    let moved: Vec<Polyline> = map
        .polylines
        .iter()
        .map(|pl| Polyline {
            category: pl.category,
            points: pl
                .points
                .iter()
                .map(|p| Point { x: cos * p.x - sin * p.y + tx, y: sin * p.x + cos * p.y + ty })
                .collect(),
        })
        .collect();
    crop_to_window(&moved, Pose::identity(), map.window)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_doc() -> String {
        r#"{
            "id": "s",
            "window": [-50.0, 50.0, -25.0, 25.0],
            "sd_polylines": [{"category": "road", "points": [[0.0, 0.0], [10.0, 0.0]]}],
            "lanes": [],
            "adjacency": [],
            "occlusion": {"rects": []}
        }"#
        .to_string()
    }

    #[test]
    fn parses_minimal_document() {
        let scene = parse_scene(&minimal_doc()).unwrap();
        assert_eq!(scene.id, "s");
        assert_eq!(scene.sd_map.polylines.len(), 1);
        assert_eq!(scene.sd_map.polylines[0].category, Category::Road);
    }

    #[test]
    fn category_matching_is_case_sensitive() {
        let doc = minimal_doc().replace("\"road\"", "\"Road\"");
        match parse_scene(&doc) {
            Err(SceneError::UnknownCategory(c)) => assert_eq!(c, "Road"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let doc = minimal_doc().replace("\"window\"", "\"glass\"");
        match parse_scene(&doc) {
            Err(SceneError::MissingField(f)) => assert_eq!(f, "window"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_polyline_rejected() {
        let doc = minimal_doc().replace("[[0.0, 0.0], [10.0, 0.0]]", "[[0.0, 0.0]]");
        match parse_scene(&doc) {
            Err(SceneError::TooFewPoints { index: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn point_outside_window_rejected() {
        let doc = minimal_doc().replace("[10.0, 0.0]", "[99.0, 0.0]");
        match parse_scene(&doc) {
            Err(SceneError::PointOutsideWindow { x, .. }) => assert_eq!(x, 99.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_ignored() {
        let doc = minimal_doc().replacen('{', "{\"extra\": 42,", 1);
        assert!(parse_scene(&doc).is_ok());
    }

    #[test]
    fn roundtrip_is_fixed_point() {
        let doc = r#"{
            "id": "rt",
            "window": [-20.0, 20.0, -10.0, 10.0],
            "sd_polylines": [
                {"category": "road", "points": [[-15.5, 0.25], [0.0, 0.0], [15.0, -3.125]]},
                {"category": "sidewalk", "points": [[-10.0, 5.0], [10.0, 5.0]]}
            ],
            "lanes": [
                {"id": 0, "centerline": [[-15.0, 1.75], [15.0, 1.75]]},
                {"id": 1, "centerline": [[15.0, -1.75], [-15.0, -1.75]]}
            ],
            "adjacency": [[0, 1], [0, 0]],
            "occlusion": {"rects": [[0.0, -5.0, 5.0, 5.0]]}
        }"#;
        let once = parse_scene(doc).unwrap();
        let twice = parse_scene(&serialize_scene(&once)).unwrap();
        assert_eq!(once, twice);
        assert_eq!(serialize_scene(&once), serialize_scene(&twice));
    }

    #[test]
    fn crop_identity_keeps_interior_points() {
        let window = Window::new(-50.0, 50.0, -25.0, 25.0).unwrap();
        let pl = Polyline::new(
            Category::Road,
            vec![Point::new(-10.0, 3.0), Point::new(0.0, 1.0), Point::new(12.0, -4.0)],
        )
        .unwrap();
        let map = crop_to_window(std::slice::from_ref(&pl), Pose::identity(), window);
        assert_eq!(map.polylines.len(), 1);
        assert_eq!(map.polylines[0], pl);
    }

    #[test]
    fn crop_rotation_convention() {
        let window = Window::new(-50.0, 50.0, -25.0, 25.0).unwrap();
        let pl = Polyline::new(
            Category::Road,
            vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)],
        )
        .unwrap();
        let map = crop_to_window(
            &[pl],
            Pose { x: 0.0, y: 0.0, heading: std::f64::consts::FRAC_PI_2 },
            window,
        );
        let p = map.polylines[0].points[1];
        assert!(p.x.abs() < 1e-12, "x {}", p.x);
        assert!((p.y + 1.0).abs() < 1e-12, "y {}", p.y);
    }

    #[test]
    fn crop_clips_long_segment_to_window() {
        let window = Window::new(-50.0, 50.0, -25.0, 25.0).unwrap();
        let pl = Polyline::new(
            Category::Road,
            vec![Point::new(-60.0, 0.0), Point::new(60.0, 0.0)],
        )
        .unwrap();
        let map = crop_to_window(&[pl], Pose::identity(), window);
        assert_eq!(map.polylines.len(), 1);
        let pts = &map.polylines[0].points;
        assert!((pts[0].x + 50.0).abs() < 1e-9);
        assert!((pts.last().unwrap().x - 50.0).abs() < 1e-9);
    }

    #[test]
    fn crop_splits_out_and_back_polyline() {
        let window = Window::new(-10.0, 10.0, -10.0, 10.0).unwrap();
        // goes out the top and comes back in
        let pl = Polyline::new(
            Category::Road,
            vec![
                Point::new(-5.0, 0.0),
                Point::new(-5.0, 15.0),
                Point::new(5.0, 15.0),
                Point::new(5.0, 0.0),
            ],
        )
        .unwrap();
        let map = crop_to_window(&[pl], Pose::identity(), window);
        assert_eq!(map.polylines.len(), 2);
        for pl in &map.polylines {
            for p in &pl.points {
                assert!(window.contains(p, 1e-9));
            }
        }
    }

    #[test]
    fn crop_drops_fully_outside() {
        let window = Window::new(-10.0, 10.0, -10.0, 10.0).unwrap();
        let pl = Polyline::new(
            Category::Road,
            vec![Point::new(20.0, 20.0), Point::new(30.0, 20.0)],
        )
        .unwrap();
        let map = crop_to_window(&[pl], Pose::identity(), window);
        assert!(map.polylines.is_empty());
    }

    #[test]
    fn resample_straight_line() {
        let pts = vec![Point::new(0.0, 0.0), Point::new(4.0, 0.0)];
        let out = resample_polyline(&pts, 5).unwrap();
        let expected = [0.0, 1.0, 2.0, 3.0, 4.0];
        for (p, ex) in out.iter().zip(expected) {
            assert!((p.x - ex).abs() < 1e-12);
            assert_eq!(p.y, 0.0);
        }
    }

    #[test]
    fn resample_two_points_returns_endpoints() {
        let pts = vec![Point::new(1.0, 2.0), Point::new(3.0, 7.0), Point::new(-4.0, 9.0)];
        let out = resample_polyline(&pts, 2).unwrap();
        assert_eq!(out, vec![pts[0], pts[2]]);
    }

    #[test]
    fn resample_l_shape_walks_arc_length() {
        let pts = vec![Point::new(0.0, 0.0), Point::new(2.0, 0.0), Point::new(2.0, 2.0)];
        let out = resample_polyline(&pts, 5).unwrap();
        let expected = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 1.0),
            Point::new(2.0, 2.0),
        ];
        for (p, ex) in out.iter().zip(expected) {
            assert!(p.dist(&ex) < 1e-12, "{p:?} vs {ex:?}");
        }
    }

    #[test]
    fn resample_arc_positions_are_uniform() {
        // oracle: recover each output point's arc position by walking the
        // source polyline; positions must sit at k * L / (n - 1)
        let pts = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 3.0),
            Point::new(4.0, 3.5),
            Point::new(7.0, -1.0),
        ];
        let n = 40;
        let out = resample_polyline(&pts, n).unwrap();
        let total = arc_length(&pts);
        let arc_position = |q: &Point| -> f64 {
            let mut walked = 0.0;
            let mut best = (f64::INFINITY, 0.0);
            for seg in pts.windows(2) {
                let len = seg[0].dist(&seg[1]);
                let d = crate::geom::point_segment_distance(q, &seg[0], &seg[1]);
                if d < best.0 {
                    let t = if len > 0.0 {
                        (((q.x - seg[0].x) * (seg[1].x - seg[0].x)
                            + (q.y - seg[0].y) * (seg[1].y - seg[0].y))
                            / (len * len))
                            .clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    best = (d, walked + t * len);
                }
                walked += len;
            }
            best.1
        };
        for (k, q) in out.iter().enumerate() {
            let expected = total * k as f64 / (n - 1) as f64;
            assert!((arc_position(q) - expected).abs() / total < 1e-9, "point {k}");
        }
        assert_eq!(out[0], pts[0]);
        assert_eq!(*out.last().unwrap(), *pts.last().unwrap());
    }

    #[test]
    fn resample_preserves_arc_length_on_aligned_vertices() {
        // vertices at arc positions the sample grid hits exactly stay on the
        // output, so the length is preserved; the L-shape corner sits at arc
        // 2.0 of 4.0 with n = 5
        let pts = vec![Point::new(0.0, 0.0), Point::new(2.0, 0.0), Point::new(2.0, 2.0)];
        let before = arc_length(&pts);
        let out = resample_polyline(&pts, 5).unwrap();
        assert!((arc_length(&out) - before).abs() / before < 1e-12);

        // straight polylines are a fixed point at any n
        let line = vec![Point::new(-3.0, 1.0), Point::new(9.0, 1.0)];
        let once = resample_polyline(&line, 17).unwrap();
        let twice = resample_polyline(&once, 17).unwrap();
        assert!((arc_length(&once) - 12.0).abs() < 1e-12);
        for (a, b) in once.iter().zip(&twice) {
            assert!(a.dist(b) < 1e-12);
        }
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let window = Window::new(-50.0, 50.0, -25.0, 25.0).unwrap();
        let map = LocalMap {
            polylines: vec![Polyline::new(
                Category::Road,
                vec![Point::new(0.0, 0.0), Point::new(10.0, 5.0)],
            )
            .unwrap()],
            window,
        };
        let out = perturb(&map, 7, 0.0, 0.0);
        assert_eq!(out, map);
    }

    #[test]
    fn perturb_same_seed_bit_identical() {
        let window = Window::new(-50.0, 50.0, -25.0, 25.0).unwrap();
        let map = LocalMap {
            polylines: vec![Polyline::new(
                Category::Road,
                vec![Point::new(-20.0, -3.0), Point::new(20.0, 3.0)],
            )
            .unwrap()],
            window,
        };
        let a = perturb(&map, 99, 1.0, 0.05);
        let b = perturb(&map, 99, 1.0, 0.05);
        assert_eq!(a, b);
        let c = perturb(&map, 100, 1.0, 0.05);
        assert_ne!(a, c);
    }

    #[test]
    fn perturb_translation_standard_deviation() {
        // A point at the origin maps to exactly the sampled translation.
        let window = Window::new(-500.0, 500.0, -500.0, 500.0).unwrap();
        let map = LocalMap {
            polylines: vec![Polyline::new(
                Category::Road,
                vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)],
            )
            .unwrap()],
            window,
        };
        let n = 10_000;
        let (mut sx, mut sy, mut sx2, mut sy2) = (0.0, 0.0, 0.0, 0.0);
        for seed in 0..n {
            let out = perturb(&map, seed, 1.0, 0.0);
            let p = out.polylines[0].points[0];
            sx += p.x;
            sy += p.y;
            sx2 += p.x * p.x;
            sy2 += p.y * p.y;
        }
        let nf = n as f64;
        let std_x = (sx2 / nf - (sx / nf).powi(2)).sqrt();
        let std_y = (sy2 / nf - (sy / nf).powi(2)).sqrt();
        assert!((std_x - 1.0).abs() < 0.05, "std_x {std_x}");
        assert!((std_y - 1.0).abs() < 0.05, "std_y {std_y}");
    }
}
