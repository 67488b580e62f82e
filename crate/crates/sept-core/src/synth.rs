//! Synthetic scene generation and the observation encoder that stands in for
//! a camera-to-BEV frontend.
//!
//! A scene is a jittered grid of two-way roads: lane centerlines are offset
//! 1.75 m from the road skeleton (one lane per direction), adjacency connects
//! lanes through shared intersection nodes, the SD map is the road skeleton
//! with edges independently dropped to simulate outdated maps, and occlusion
//! rectangles hide part of the observation. The observation itself is the
//! rasterized ground-truth centerlines with occluded cells zeroed and
//! salt-and-pepper noise; the SD prior is the only path through which
//! occluded structure can be recovered.

use crate::geom::{segment_intersection, GridSpec, Point, Window};
use crate::metrics::{Lane, LaneGraph};
use crate::nn::ConvStack;
use crate::raster::supercover_cells;
use crate::rng::{fnv1a64, mix, SplitMix64};
use crate::sdmap::{crop_to_window, perturb, Category, LocalMap, Polyline, Pose, Rect, Scene};
use crate::tensor::DiffArray;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LANE_OFFSET_M: f64 = 1.75;
const SIDEWALK_OFFSET_M: f64 = 5.25;
const ROAD_VERTEX_STEP_M: f64 = 4.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{field} must lie in [0, 1], got {value}")]
    BadProbability { field: &'static str, value: f64 },
    #[error("n_roads must be >= 1")]
    NoRoads,
    #[error("grid_spacing must be positive")]
    BadSpacing,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthParams {
    pub seed: u64,
    pub n_roads: usize,
    pub grid_spacing: f64,
    pub occlusion_fraction: f64,
    pub drop_sd_edge_prob: f64,
    /// Rigid SD-map misalignment baked into the generated scene.
    pub sigma_t: f64,
    pub sigma_theta: f64,
    pub window: Window,
}

impl SynthParams {
    pub fn new(window: Window) -> Self {
        SynthParams {
            seed: 0,
            n_roads: 5,
            grid_spacing: 6.0,
            occlusion_fraction: 0.0,
            drop_sd_edge_prob: 0.0,
            sigma_t: 0.0,
            sigma_theta: 0.0,
            window,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (field, value) in [
            ("occlusion_fraction", self.occlusion_fraction),
            ("drop_sd_edge_prob", self.drop_sd_edge_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SynthError::BadProbability { field, value });
            }
        }
        if self.n_roads < 1 {
            return Err(SynthError::NoRoads);
        }
        if self.grid_spacing <= 0.0 {
            return Err(SynthError::BadSpacing);
        }
        Ok(())
    }
}

struct RoadEdge {
    points: Vec<Point>,
    start_node: usize,
    end_node: usize,
}

fn dedup_points(points: Vec<Point>) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(points.len());
    for p in points {
        if out.last().map_or(true, |last| last.dist(&p) > 1e-9) {
            out.push(p);
        }
    }
    out
}

/// Offset a polyline laterally using averaged per-vertex normals.
fn offset_polyline(points: &[Point], offset: f64) -> Vec<Point> {
    let n = points.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let dir_in = if i > 0 {
            Some((points[i].x - points[i - 1].x, points[i].y - points[i - 1].y))
        } else {
            None
        };
        let dir_out = if i + 1 < n {
            Some((points[i + 1].x - points[i].x, points[i + 1].y - points[i].y))
        } else {
            None
        };
        let (dx, dy) = match (dir_in, dir_out) {
            (Some(a), Some(b)) => (a.0 + b.0, a.1 + b.1),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => (1.0, 0.0),
        };
        let len = (dx * dx + dy * dy).sqrt().max(1e-12);
        // left normal of the travel direction
        let (nx, ny) = (-dy / len, dx / len);
        out.push(Point::new(points[i].x + offset * nx, points[i].y + offset * ny));
    }
    dedup_points(out)
}

/// Split a road polyline at the given arc-length positions.
fn split_at(points: &[Point], mut cuts: Vec<f64>) -> Vec<Vec<Point>> {
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    cuts.dedup_by(|a, b| (*a - *b).abs() < 0.5);
    let total: f64 = crate::geom::arc_length(points);
    let mut bounds = vec![0.0];
    bounds.extend(cuts.into_iter().filter(|&s| s > 0.5 && s < total - 0.5));
    bounds.push(total);
    let mut pieces = Vec::new();
    for pair in bounds.windows(2) {
        let piece = arc_slice(points, pair[0], pair[1]);
        if piece.len() >= 2 {
            pieces.push(piece);
        }
    }
    pieces
}

fn arc_slice(points: &[Point], s0: f64, s1: f64) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::new();
    let mut walked = 0.0;
    for seg in points.windows(2) {
        let len = seg[0].dist(&seg[1]);
        if len <= 0.0 {
            continue;
        }
        let (a, b) = (walked, walked + len);
        walked = b;
        if b < s0 || a > s1 {
            continue;
        }
        let t0 = ((s0 - a) / len).clamp(0.0, 1.0);
        let t1 = ((s1 - a) / len).clamp(0.0, 1.0);
        for t in [t0, t1] {
            let q = seg[0].lerp(&seg[1], t);
            if out.last().map_or(true, |last| last.dist(&q) > 1e-9) {
                out.push(q);
            }
        }
    }
    out
}

/// Deterministically generate one scene.
pub fn generate_scene(params: &SynthParams) -> Result<Scene, SynthError> {
    params.validate()?;
    let window = params.window;
    let mut rng = SplitMix64::new(mix(params.seed, 0x5ce9e));

    // road skeletons: along-x roads at spread y positions, along-y roads at
    // spread x positions, pitch = grid_spacing, capped by window capacity
    let capacity_x = ((window.width_y() / params.grid_spacing).floor() as usize).max(1);
    let capacity_y = ((window.width_x() / params.grid_spacing).floor() as usize).max(1);
    let count_x = params.n_roads.div_ceil(2).min(capacity_x);
    let count_y = (params.n_roads - count_x.min(params.n_roads)).min(capacity_y);

    let positions = |count: usize, lo: f64, hi: f64, rng: &mut SplitMix64| -> Vec<f64> {
        let extent = hi - lo;
        let pitch = params.grid_spacing;
        let start = lo + (extent - pitch * (count.saturating_sub(1)) as f64) / 2.0;
        (0..count)
            .map(|k| {
                let jitter = 0.05 * pitch * rng.next_gaussian();
                (start + pitch * k as f64 + jitter).clamp(lo + 0.5, hi - 0.5)
            })
            .collect()
    };
    let ys = positions(count_x, window.y_min, window.y_max, &mut rng);
    let xs = positions(count_y, window.x_min, window.x_max, &mut rng);

    let mut roads: Vec<Vec<Point>> = Vec::new();
    let wiggle = 0.12;
    for &y0 in &ys {
        let mut pts = Vec::new();
        let mut x = window.x_min;
        while x < window.x_max - 1e-9 {
            let y = (y0 + wiggle * rng.next_gaussian()).clamp(window.y_min + 0.3, window.y_max - 0.3);
            pts.push(Point::new(x, y));
            x += ROAD_VERTEX_STEP_M;
        }
        pts.push(Point::new(window.x_max, y0));
        roads.push(dedup_points(pts));
    }
    for &x0 in &xs {
        let mut pts = Vec::new();
        let mut y = window.y_min;
        while y < window.y_max - 1e-9 {
            let x = (x0 + wiggle * rng.next_gaussian()).clamp(window.x_min + 0.3, window.x_max - 0.3);
            pts.push(Point::new(x, y));
            y += ROAD_VERTEX_STEP_M;
        }
        pts.push(Point::new(x0, window.y_max));
        roads.push(dedup_points(pts));
    }

    // pairwise proper intersections -> per-road cut positions + shared nodes
    let mut cut_arcs: Vec<Vec<f64>> = vec![Vec::new(); roads.len()];
    let mut node_points: Vec<Point> = Vec::new();
    for i in 0..roads.len() {
        for j in i + 1..roads.len() {
            let mut walked_i = 0.0;
            for si in roads[i].windows(2) {
                let len_i = si[0].dist(&si[1]);
                let mut walked_j = 0.0;
                for sj in roads[j].windows(2) {
                    let len_j = sj[0].dist(&sj[1]);
                    if let Some(hit) = segment_intersection(&si[0], &si[1], &sj[0], &sj[1], true) {
                        cut_arcs[i].push(walked_i + si[0].dist(&hit));
                        cut_arcs[j].push(walked_j + sj[0].dist(&hit));
                        node_points.push(hit);
                    }
                    walked_j += len_j;
                }
                walked_i += len_i;
            }
        }
    }

    // edges between cuts; node ids assigned by proximity to intersection
    // points, with endpoints becoming their own nodes
    let mut edges: Vec<RoadEdge> = Vec::new();
    let find_node = |p: &Point, nodes: &mut Vec<Point>| -> usize {
        for (ix, q) in nodes.iter().enumerate() {
            if q.dist(p) <= 0.6 {
                return ix;
            }
        }
        nodes.push(*p);
        nodes.len() - 1
    };
    for (road, cuts) in roads.iter().zip(cut_arcs.into_iter()) {
        for piece in split_at(road, cuts) {
            let start = find_node(&piece[0], &mut node_points);
            let end = find_node(piece.last().unwrap(), &mut node_points);
            edges.push(RoadEdge { points: piece, start_node: start, end_node: end });
        }
    }

    // two directed lanes per edge, offset from the skeleton
    let mut lanes: Vec<Lane> = Vec::new();
    let mut lane_nodes: Vec<(usize, usize)> = Vec::new(); // (start_node, end_node)
    let mut lane_edge: Vec<(usize, bool)> = Vec::new(); // (edge, forward)
    for (edge_ix, edge) in edges.iter().enumerate() {
        for (forward, sign) in [(true, -1.0), (false, 1.0)] {
            let mut pts = offset_polyline(&edge.points, sign * LANE_OFFSET_M);
            if !forward {
                pts.reverse();
            }
            // clip to the window; keep the longest surviving piece
            let Ok(pl) = Polyline::new(Category::Road, dedup_points(pts)) else { continue };
            let clipped = crop_to_window(std::slice::from_ref(&pl), Pose::identity(), window);
            let Some(best) = clipped
                .polylines
                .into_iter()
                .max_by(|a, b| {
                    crate::geom::arc_length(&a.points)
                        .partial_cmp(&crate::geom::arc_length(&b.points))
                        .expect("finite")
                })
            else {
                continue;
            };
            lanes.push(Lane { id: lanes.len() as i64, centerline: best.points });
            lane_nodes.push(if forward {
                (edge.start_node, edge.end_node)
            } else {
                (edge.end_node, edge.start_node)
            });
            lane_edge.push((edge_ix, forward));
        }
    }
    let n = lanes.len();
    let mut adjacency = vec![0u8; n * n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let connected = lane_nodes[a].1 == lane_nodes[b].0;
            // exclude the U-turn back onto the same edge
            let u_turn = lane_edge[a].0 == lane_edge[b].0 && lane_edge[a].1 != lane_edge[b].1;
            if connected && !u_turn {
                adjacency[a * n + b] = 1;
            }
        }
    }

    // SD map: road edges with independent drops, sidewalks, crosswalks
    let mut sd_polylines: Vec<Polyline> = Vec::new();
    for edge in &edges {
        let keep = rng.next_f64() >= params.drop_sd_edge_prob;
        if keep {
            if let Ok(pl) = Polyline::new(Category::Road, dedup_points(edge.points.clone())) {
                sd_polylines.push(pl);
            }
        }
    }
    for road in &roads {
        for side in [-1.0, 1.0] {
            let pts = offset_polyline(road, side * SIDEWALK_OFFSET_M);
            if let Ok(pl) = Polyline::new(Category::Sidewalk, pts) {
                let clipped = crop_to_window(std::slice::from_ref(&pl), Pose::identity(), window);
                sd_polylines.extend(clipped.polylines);
            }
        }
    }
    for node in node_points.iter().take(edges.len()) {
        let crossing = Polyline::new(
            Category::Crosswalk,
            vec![Point::new(node.x + 3.0, node.y - 4.0), Point::new(node.x + 3.0, node.y + 4.0)],
        );
        if let Ok(pl) = crossing {
            let clipped = crop_to_window(std::slice::from_ref(&pl), Pose::identity(), window);
            sd_polylines.extend(clipped.polylines);
        }
    }
    let sd_map = LocalMap { polylines: sd_polylines, window };
    let sd_map = if params.sigma_t > 0.0 || params.sigma_theta > 0.0 {
        perturb(&sd_map, mix(params.seed, 0x6e01), params.sigma_t, params.sigma_theta)
    } else {
        sd_map
    };

    // occlusion rectangles until the target cell fraction is covered
    let grid = GridSpec::with_default_cell(window);
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut occlusion: Vec<Rect> = Vec::new();
    let mut mask = vec![false; rows * cols];
    let total_cells = rows * cols;
    let target = (params.occlusion_fraction * total_cells as f64).round() as usize;
    let ceiling = target + (0.04 * total_cells as f64) as usize;
    let mut covered = 0usize;
    let mut attempts = 0;
    while covered < target && attempts < 400 {
        attempts += 1;
        let rw = rng.uniform(0.2, 0.4) * window.width_x();
        let rh = rng.uniform(0.25, 0.5) * window.width_y();
        // occlusion prefers intersections (vehicles block exactly where the
        // road structure is hardest to see), with some scattered elsewhere
        let (cx, cy) = if !node_points.is_empty() && rng.next_f64() < 0.6 {
            let node = node_points[rng.next_index(node_points.len())];
            (node.x + 2.0 * rng.next_gaussian(), node.y + 2.0 * rng.next_gaussian())
        } else {
            (rng.uniform(window.x_min, window.x_max), rng.uniform(window.y_min, window.y_max))
        };
        let rect = Rect::normalized(
            (cx - rw / 2.0).max(window.x_min),
            (cy - rh / 2.0).max(window.y_min),
            (cx + rw / 2.0).min(window.x_max),
            (cy + rh / 2.0).min(window.y_max),
        );
        let gain: usize = (0..rows * cols)
            .filter(|&i| !mask[i] && rect.contains(&grid.cell_center(i / cols, i % cols)))
            .count();
        if covered + gain > ceiling {
            continue; // would overshoot the requested fraction
        }
        occlusion.push(rect);
        covered += gain;
        for r in 0..rows {
            for c in 0..cols {
                if rect.contains(&grid.cell_center(r, c)) {
                    mask[r * cols + c] = true;
                }
            }
        }
    }

    Ok(Scene {
        id: format!("scene_{:016x}", params.seed),
        sd_map,
        lane_graph: LaneGraph::new(lanes, adjacency).expect("construction keeps the invariants"),
        occlusion,
    })
}

/// Rasterize the ground-truth lane centerlines (no occlusion, no noise).
pub fn centerline_raster(scene: &Scene, grid: &GridSpec) -> Vec<f64> {
    let mut out = vec![0.0; grid.rows() * grid.cols()];
    for lane in &scene.lane_graph.lanes {
        for seg in lane.centerline.windows(2) {
            for (r, c) in supercover_cells(grid, &seg[0], &seg[1]) {
                out[r * grid.cols() + c] = 1.0;
            }
        }
    }
    out
}

/// Render the synthetic observation: channel 0 is the ground-truth
/// centerline raster with occluded cells zeroed and salt-and-pepper noise
/// (each cell flips with probability `noise_p`), channel 1 is the occlusion
/// mask. This is the only path ground truth reaches the model.
pub fn render_observation(scene: &Scene, grid: &GridSpec, noise_p: f64, seed: u64) -> DiffArray {
    let (rows, cols) = (grid.rows(), grid.cols());
    let lanes = centerline_raster(scene, grid);
    let occluded = scene.occlusion_mask(grid);
    let mut rng = SplitMix64::new(seed);
    let mut data = vec![0.0; rows * cols * 2];
    for i in 0..rows * cols {
        let mut v = if occluded[i] { 0.0 } else { lanes[i] };
        if rng.next_f64() < noise_p {
            v = 1.0 - v;
        }
        data[i * 2] = v;
        data[i * 2 + 1] = if occluded[i] { 1.0 } else { 0.0 };
    }
    DiffArray::new(vec![rows, cols, 2], data).expect("consistent dims")
}

/// Observation encoder standing in for a camera-to-BEV frontend: three
/// spatial-preserving conv blocks mapping 2 -> `channels`.
pub struct ObsEncoder {
    stack: ConvStack,
}

impl ObsEncoder {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        ObsEncoder { stack: ConvStack::new(prefix, 2, channels, 3) }
    }

    pub fn init(&self, params: &mut crate::tensor::Params, rng: &mut SplitMix64) {
        self.stack.init(params, rng);
    }

    pub fn forward(
        &self,
        rec: &crate::tensor::GradRecord,
        leaves: &crate::tensor::LeafParams,
        obs: &DiffArray,
    ) -> Result<DiffArray, crate::tensor::TensorError> {
        self.stack.forward(rec, leaves, obs)
    }
}

// ── dataset manifest ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub split: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub scenes: Vec<ManifestEntry>,
}

/// Assign train/val splits by ranking scenes on a seeded hash of their id;
/// the lowest-ranked fifth (rounded) becomes validation.
pub fn assign_splits(ids: &[String], seed: u64) -> Vec<&'static str> {
    let mut ranked: Vec<(u64, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (mix(seed ^ fnv1a64(id.as_bytes()), 0x5b717), i))
        .collect();
    ranked.sort_unstable();
    let val_count = (ids.len() as f64 * 0.2).round() as usize;
    let mut out = vec!["train"; ids.len()];
    for &(_, ix) in ranked.iter().take(val_count) {
        out[ix] = "val";
    }
    out
}
