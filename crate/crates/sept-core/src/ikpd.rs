//! Intersection-aware keypoint detection: extract road junctions and
//! crossings from the SD map, render Gaussian ground-truth heatmaps, predict
//! heatmaps with a lightweight head, and score them with a penalty-reduced
//! focal loss.

use crate::geom::{segment_intersection, GridSpec, Point};
use crate::nn::{init_const, init_weight, init_zeros, linear, pointwise};
use crate::pgm::write_pgm;
use crate::rng::SplitMix64;
use crate::sdmap::{Category, LocalMap};
use crate::tensor::{ops, DiffArray, GradRecord, LeafParams, Params, TensorError};
use std::path::Path;

/// Snap tolerance for merging road-polyline vertices into graph nodes
/// (half a raster cell).
pub const ENDPOINT_SNAP_EPS: f64 = 0.25;

/// Heatmap values below this are truncated to zero.
pub const HEATMAP_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeypointKind {
    /// A snapped road-graph node of degree >= 3. SD roads carry no
    /// direction, so merge and diverge nodes collapse into this one class.
    Junction,
    /// A proper interior crossing of two road segments from different
    /// polylines.
    Crossing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub position: Point,
    pub kind: KeypointKind,
}

/// Dense keypoint distribution over the grid, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(h: usize, w: usize) -> Self {
        Heatmap { h, w, data: vec![0.0; h * w] }
    }

    /// Wrap a predicted [H, W, 1] array (values must already be in [0, 1]).
    pub fn from_array(arr: &DiffArray) -> Option<Self> {
        match arr.shape() {
            [h, w, 1] | [h, w] => Some(Heatmap { h: *h, w: *w, data: arr.data().to_vec() }),
            _ => None,
        }
    }

    pub fn to_array(&self) -> DiffArray {
        DiffArray::new(vec![self.h, self.w, 1], self.data.clone()).expect("consistent dims")
    }

    pub fn export_pgm(&self, path: &Path) -> std::io::Result<()> {
        write_pgm(path, self.h, self.w, &self.data)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Extract intersection keypoints from the road polylines of a map.
///
/// A node graph is built by snapping all road-polyline vertices within
/// [`ENDPOINT_SNAP_EPS`] (connected components of the epsilon relation, so
/// the result does not depend on polyline order or point direction). Every
/// node with three or more incident segments emits a junction; every proper
/// interior crossing between segments of different road polylines emits a
/// crossing. Keypoints are deduplicated within the same tolerance, junctions
/// first, and clipped to the map window.
pub fn extract_intersections(map: &LocalMap) -> Vec<Keypoint> {
    let roads: Vec<&crate::sdmap::Polyline> =
        map.polylines.iter().filter(|p| p.category == Category::Road).collect();

    // flatten vertices
    let mut verts: Vec<Point> = Vec::new();
    let mut vert_ix: Vec<Vec<usize>> = Vec::with_capacity(roads.len());
    for road in &roads {
        let mut ixs = Vec::with_capacity(road.points.len());
        for p in &road.points {
            ixs.push(verts.len());
            verts.push(*p);
        }
        vert_ix.push(ixs);
    }

    // snap: connected components under the eps relation
    let mut uf = UnionFind::new(verts.len());
    for i in 0..verts.len() {
        for j in i + 1..verts.len() {
            if verts[i].dist(&verts[j]) <= ENDPOINT_SNAP_EPS {
                uf.union(i, j);
            }
        }
    }
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..verts.len() {
        members.entry(uf.find(i)).or_default().push(i);
    }
    let mut node_of = vec![0usize; verts.len()];
    let mut node_pos: Vec<Point> = Vec::new();
    for (node, (_, group)) in members.iter().enumerate() {
        // centroid over members sorted by coordinates: input-order invariant
        let mut pts: Vec<Point> = group.iter().map(|&i| verts[i]).collect();
        pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).expect("finite coordinates"));
        let n = pts.len() as f64;
        node_pos.push(Point::new(
            pts.iter().map(|p| p.x).sum::<f64>() / n,
            pts.iter().map(|p| p.y).sum::<f64>() / n,
        ));
        for &i in group {
            node_of[i] = node;
        }
    }

    // degree count over polyline segments
    let mut degree = vec![0usize; node_pos.len()];
    for ixs in &vert_ix {
        for pair in ixs.windows(2) {
            let (a, b) = (node_of[pair[0]], node_of[pair[1]]);
            if a != b {
                degree[a] += 1;
                degree[b] += 1;
            }
        }
    }
    let mut junctions: Vec<Point> = degree
        .iter()
        .enumerate()
        .filter(|&(_, d)| *d >= 3)
        .map(|(n, _)| node_pos[n])
        .collect();
    junctions.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).expect("finite"));

    // proper crossings between different polylines
    let mut crossings: Vec<Point> = Vec::new();
    for i in 0..roads.len() {
        for j in i + 1..roads.len() {
            for sa in roads[i].points.windows(2) {
                for sb in roads[j].points.windows(2) {
                    if let Some(hit) = segment_intersection(&sa[0], &sa[1], &sb[0], &sb[1], true) {
                        crossings.push(hit);
                    }
                }
            }
        }
    }
    crossings.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).expect("finite"));

    let mut out: Vec<Keypoint> = Vec::new();
    let push_unique = |p: Point, kind: KeypointKind, out: &mut Vec<Keypoint>| {
        if !map.window.contains(&p, 0.0) {
            return;
        }
        if out.iter().all(|k| k.position.dist(&p) > ENDPOINT_SNAP_EPS) {
            out.push(Keypoint { position: p, kind });
        }
    };
    for p in junctions {
        push_unique(p, KeypointKind::Junction, &mut out);
    }
    for p in crossings {
        push_unique(p, KeypointKind::Crossing, &mut out);
    }
    out
}

/// Render keypoints as Gaussians combined by element-wise maximum.
///
/// `sigma` is in cells; the value at a cell is exp(-d^2 / (2 sigma^2)) with
/// `d` the distance from the cell center to the keypoint's continuous grid
/// coordinate. The cell containing each keypoint is set to exactly 1.0 —
/// the focal loss treats `y == 1` cells as its positives, so every keypoint
/// must own one (the convention of confidence-based keypoint supervision).
/// Values below [`HEATMAP_FLOOR`] truncate to zero.
pub fn render_heatmap(keypoints: &[Keypoint], grid: &GridSpec, sigma: f64) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let (h, w) = (grid.rows(), grid.cols());
    let mut map = Heatmap::zeros(h, w);
    // beyond this radius the value is under the floor
    let radius = sigma * (-2.0 * HEATMAP_FLOOR.ln()).sqrt();
    for kp in keypoints {
        let (gu, gv) = grid.grid_coord(&kp.position);
        let r_lo = ((gu - radius).floor().max(0.0)) as usize;
        let r_hi = ((gu + radius).ceil().min(h as f64 - 1.0)) as usize;
        let c_lo = ((gv - radius).floor().max(0.0)) as usize;
        let c_hi = ((gv + radius).ceil().min(w as f64 - 1.0)) as usize;
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let du = r as f64 + 0.5 - gu;
                let dv = c as f64 + 0.5 - gv;
                let value = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
                if value >= HEATMAP_FLOOR && value > map.data[r * w + c] {
                    map.data[r * w + c] = value;
                }
            }
        }
        if let Some((r, c)) = grid.cell_of(&kp.position) {
            map.data[r * w + c] = 1.0;
        }
    }
    map
}

/// Keypoint decoding head over the fused BEV feature.
///
/// Two residual blocks of depthwise separable convolutions (3x3 depthwise at
/// dilation 1 then 2, each followed by a pointwise projection and
/// squeeze-excitation channel reweighting), then a 1x1 projection to one
/// channel with a sigmoid.
pub struct IkpdHead {
    pub prefix: String,
    pub channels: usize,
}

impl IkpdHead {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        IkpdHead { prefix: prefix.into(), channels }
    }

    fn squeeze_channels(&self) -> usize {
        (self.channels / 4).max(1)
    }

    pub fn init(&self, params: &mut Params, rng: &mut SplitMix64) {
        let c = self.channels;
        let s = self.squeeze_channels();
        for block in 0..2 {
            init_weight(params, format!("{}.block{block}.dw", self.prefix), vec![3, 3, c], 9, rng);
            init_weight(params, format!("{}.block{block}.pw.weight", self.prefix), vec![c, c], c, rng);
            init_zeros(params, format!("{}.block{block}.pw.bias", self.prefix), vec![c]);
            init_weight(params, format!("{}.block{block}.se.w1", self.prefix), vec![c, s], c, rng);
            init_zeros(params, format!("{}.block{block}.se.b1", self.prefix), vec![s]);
            init_weight(params, format!("{}.block{block}.se.w2", self.prefix), vec![s, c], s, rng);
            init_zeros(params, format!("{}.block{block}.se.b2", self.prefix), vec![c]);
        }
        // zero weight + low bias: the head starts at a uniform p = 0.1
        // heatmap, so early focal gradients stay small and unsaturated
        init_zeros(params, format!("{}.out.weight", self.prefix), vec![c, 1]);
        init_const(params, format!("{}.out.bias", self.prefix), vec![1], -2.19);
    }

    fn squeeze_excite(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        block: usize,
        x: &DiffArray,
    ) -> Result<DiffArray, TensorError> {
        let c = self.channels;
        let w1 = leaves.get(&format!("{}.block{block}.se.w1", self.prefix))?;
        let b1 = leaves.get(&format!("{}.block{block}.se.b1", self.prefix))?;
        let w2 = leaves.get(&format!("{}.block{block}.se.w2", self.prefix))?;
        let b2 = leaves.get(&format!("{}.block{block}.se.b2", self.prefix))?;
        let pooled = ops::global_avg_pool(rec, x)?.reshaped(vec![1, c])?;
        let hidden = ops::relu(rec, &linear(rec, &pooled, w1, Some(b1))?)?;
        let scales = ops::sigmoid(rec, &linear(rec, &hidden, w2, Some(b2))?)?.reshaped(vec![c])?;
        ops::mul_channels(rec, x, &scales)
    }

    pub fn forward(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        input: &DiffArray,
    ) -> Result<DiffArray, TensorError> {
        let mut x = input.clone();
        for (block, dilation) in [(0usize, 1usize), (1, 2)] {
            let dw = leaves.get(&format!("{}.block{block}.dw", self.prefix))?;
            let pw_w = leaves.get(&format!("{}.block{block}.pw.weight", self.prefix))?;
            let pw_b = leaves.get(&format!("{}.block{block}.pw.bias", self.prefix))?;
            let t = ops::conv2d(rec, &x, dw, 1, dilation, true)?;
            let t = pointwise(rec, &t, pw_w, Some(pw_b))?;
            let t = self.squeeze_excite(rec, leaves, block, &t)?;
            x = ops::add(rec, &x, &t)?;
        }
        let w = leaves.get(&format!("{}.out.weight", self.prefix))?;
        let b = leaves.get(&format!("{}.out.bias", self.prefix))?;
        ops::sigmoid(rec, &pointwise(rec, &x, w, Some(b))?)
    }
}

/// Penalty-reduced focal loss for Gaussian heatmap targets.
///
/// With y the target, p the prediction clamped into [1e-7, 1 - 1e-7], and
/// N the number of cells where y == 1 (at least 1):
///
/// loss = -(1/N) * sum over cells of
///   (1 - p)^2 * ln p              where y == 1
///   (1 - y)^4 * p^2 * ln(1 - p)   elsewhere
pub fn focal_loss(
    rec: &GradRecord,
    pred: &DiffArray,
    target: &Heatmap,
) -> Result<DiffArray, TensorError> {
    let cells = target.h * target.w;
    if pred.len() != cells {
        return Err(TensorError::ShapeMismatch {
            op: "focal_loss",
            left: pred.shape().to_vec(),
            right: vec![target.h, target.w, 1],
        });
    }
    let mut pos_mask = vec![0.0; cells];
    let mut neg_weight = vec![0.0; cells];
    let mut n_pos = 0usize;
    for (i, &y) in target.data.iter().enumerate() {
        if y == 1.0 {
            pos_mask[i] = 1.0;
            n_pos += 1;
        } else {
            neg_weight[i] = (1.0 - y).powi(4);
        }
    }
    let shape = pred.shape().to_vec();
    let pos_mask = DiffArray::new(shape.clone(), pos_mask)?;
    let neg_weight = DiffArray::new(shape, neg_weight)?;

    let p = ops::clamp_value(rec, pred, 1e-7, 1.0 - 1e-7)?;
    let one_minus_p = ops::affine(rec, &p, -1.0, 1.0)?;
    let log_p = ops::ln(rec, &p)?;
    let log_q = ops::ln(rec, &one_minus_p)?;

    let pos_term = ops::mul(rec, &pos_mask, &ops::mul(rec, &ops::mul(rec, &one_minus_p, &one_minus_p)?, &log_p)?)?;
    let neg_term = ops::mul(rec, &neg_weight, &ops::mul(rec, &ops::mul(rec, &p, &p)?, &log_q)?)?;
    let total = ops::sum(rec, &ops::add(rec, &pos_term, &neg_term)?)?;
    ops::scale(rec, &total, -1.0 / n_pos.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Window;
    use crate::sdmap::Polyline;

    fn window() -> Window {
        Window::new(-50.0, 50.0, -25.0, 25.0).unwrap()
    }

    fn road(points: &[(f64, f64)]) -> Polyline {
        Polyline::new(Category::Road, points.iter().map(|&(x, y)| Point::new(x, y)).collect())
            .unwrap()
    }

    #[test]
    fn straight_road_has_no_keypoints() {
        let map = LocalMap { polylines: vec![road(&[(-10.0, 0.0), (10.0, 0.0)])], window: window() };
        assert!(extract_intersections(&map).is_empty());
    }

    #[test]
    fn t_junction_at_shared_vertex() {
        let map = LocalMap {
            polylines: vec![
                road(&[(-10.0, 0.0), (0.0, 0.0), (10.0, 0.0)]),
                road(&[(0.0, 0.0), (0.0, 10.0)]),
            ],
            window: window(),
        };
        let kps = extract_intersections(&map);
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].kind, KeypointKind::Junction);
        assert!(kps[0].position.dist(&Point::new(0.0, 0.0)) < 1e-9);
    }

    #[test]
    fn x_crossing_at_interior_intersection() {
        let map = LocalMap {
            polylines: vec![road(&[(-5.0, 0.0), (5.0, 0.0)]), road(&[(0.0, -5.0), (0.0, 5.0)])],
            window: window(),
        };
        let kps = extract_intersections(&map);
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].kind, KeypointKind::Crossing);
        assert!(kps[0].position.dist(&Point::new(0.0, 0.0)) < 1e-12);
    }

    #[test]
    fn extraction_invariant_to_order_and_reversal() {
        let a = road(&[(-10.0, 0.0), (0.0, 0.0), (10.0, 0.0)]);
        let b = road(&[(0.0, 0.0), (0.0, 10.0)]);
        let c = road(&[(-5.0, -8.0), (5.0, -8.0)]);
        let mut reversed_b = b.clone();
        reversed_b.points.reverse();

        let base = extract_intersections(&LocalMap {
            polylines: vec![a.clone(), b, c.clone()],
            window: window(),
        });
        let shuffled = extract_intersections(&LocalMap {
            polylines: vec![c, reversed_b, a],
            window: window(),
        });
        assert_eq!(base.len(), shuffled.len());
        for (x, y) in base.iter().zip(&shuffled) {
            assert!(x.position.dist(&y.position) < 1e-9);
            assert_eq!(x.kind, y.kind);
        }
    }

    #[test]
    fn non_road_categories_are_ignored() {
        let mut cross = road(&[(0.0, -5.0), (0.0, 5.0)]);
        cross.category = Category::Crosswalk;
        let map = LocalMap {
            polylines: vec![road(&[(-5.0, 0.0), (5.0, 0.0)]), cross],
            window: window(),
        };
        assert!(extract_intersections(&map).is_empty());
    }

    fn grid() -> GridSpec {
        GridSpec::with_default_cell(window())
    }

    #[test]
    fn empty_keypoints_render_zero() {
        let map = render_heatmap(&[], &grid(), 2.0);
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_centered_keypoint_peaks_at_one() {
        let g = grid();
        let center = g.cell_center(100, 50);
        let kp = Keypoint { position: center, kind: KeypointKind::Junction };
        let map = render_heatmap(&[kp], &g, 2.0);
        assert_eq!(map.data[100 * g.cols() + 50], 1.0);
    }

    #[test]
    fn gaussian_closed_form_at_distance_two() {
        let g = grid();
        let center = g.cell_center(100, 50);
        let kp = Keypoint { position: center, kind: KeypointKind::Junction };
        let map = render_heatmap(&[kp], &g, 2.0);
        // two cells away along a row: d = 2, sigma = 2 -> exp(-0.5)
        let v = map.data[102 * g.cols() + 50];
        assert!((v - 0.606531).abs() < 1e-6, "{v}");
    }

    #[test]
    fn overlapping_keypoints_combine_by_max_order_free() {
        let g = grid();
        let k1 = Keypoint { position: g.cell_center(100, 50), kind: KeypointKind::Junction };
        let k2 = Keypoint { position: g.cell_center(101, 51), kind: KeypointKind::Crossing };
        let ab = render_heatmap(&[k1, k2], &g, 2.0);
        let ba = render_heatmap(&[k2, k1], &g, 2.0);
        assert_eq!(ab, ba);
        for &v in ab.data.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn far_values_truncate_to_zero() {
        let g = grid();
        let kp = Keypoint { position: g.cell_center(100, 50), kind: KeypointKind::Junction };
        let map = render_heatmap(&[kp], &g, 2.0);
        assert_eq!(map.data[0], 0.0);
        // every nonzero value respects the floor
        for &v in map.data.iter().filter(|&&v| v != 0.0) {
            assert!(v >= HEATMAP_FLOOR);
        }
    }

    #[test]
    fn head_output_shape_and_range() {
        let head = IkpdHead::new("ikpd", 8);
        let mut params = Params::new();
        let mut rng = SplitMix64::new(0);
        head.init(&mut params, &mut rng);
        let rec = GradRecord::new();
        let leaves = params.leaves(&rec);
        let x = DiffArray::new(vec![8, 8, 8], (0..512).map(|i| (i as f64 * 0.03).sin()).collect())
            .unwrap();
        let y = head.forward(&rec, &leaves, &x).unwrap();
        assert_eq!(y.shape(), &[8, 8, 1]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn squeeze_excite_symmetric_at_zero_weights() {
        let head = IkpdHead::new("ikpd", 8);
        let mut params = Params::new();
        let mut rng = SplitMix64::new(0);
        head.init(&mut params, &mut rng);
        // zero the bottleneck: every channel scale becomes sigmoid(0) = 0.5
        for name in ["ikpd.block0.se.w1", "ikpd.block0.se.w2"] {
            let shape = params.get(name).unwrap().shape().to_vec();
            params.insert(name, DiffArray::zeros(shape));
        }
        let rec = GradRecord::new();
        let leaves = params.leaves(&rec);
        let x = DiffArray::full(vec![4, 4, 8], 3.0);
        let y = head.squeeze_excite(&rec, &leaves, 0, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn focal_loss_closed_forms() {
        let rec = GradRecord::new();
        let quarter_ln2 = 0.25 * std::f64::consts::LN_2;

        // single cell, y = 1, p = 0.5 -> (1 - 0.5)^2 * ln 2 = 0.25 ln 2
        let mut target = Heatmap::zeros(1, 1);
        target.data[0] = 1.0;
        let pred = DiffArray::new(vec![1, 1, 1], vec![0.5]).unwrap();
        let loss = focal_loss(&rec, &pred, &target).unwrap().item().unwrap();
        assert!((loss - quarter_ln2).abs() < 1e-12, "{loss}");
        assert!((loss - 0.173287).abs() < 1e-6);

        // single cell, y = 0, p = 0.5 -> (1 - 0)^4 * 0.25 * ln 2
        let target = Heatmap::zeros(1, 1);
        let loss = focal_loss(&rec, &pred, &target).unwrap().item().unwrap();
        assert!((loss - quarter_ln2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn focal_loss_perfect_prediction_is_tiny() {
        let rec = GradRecord::new();
        let mut target = Heatmap::zeros(2, 2);
        target.data[0] = 1.0;
        target.data[3] = 1.0;
        let pred = DiffArray::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = focal_loss(&rec, &pred, &target).unwrap().item().unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-5, "{loss}");
    }

    #[test]
    fn focal_loss_decreases_toward_target() {
        let rec = GradRecord::new();
        let mut target = Heatmap::zeros(1, 2);
        target.data[0] = 1.0;
        let at = |p0: f64, p1: f64| {
            let pred = DiffArray::new(vec![1, 2, 1], vec![p0, p1]).unwrap();
            focal_loss(&rec, &pred, &target).unwrap().item().unwrap()
        };
        assert!(at(0.9, 0.1) < at(0.8, 0.1));
        assert!(at(0.8, 0.1) < at(0.5, 0.1));
        assert!(at(0.9, 0.1) < at(0.9, 0.3));
        assert!(at(0.5, 0.1) >= 0.0);
    }

    #[test]
    fn focal_loss_uses_gaussian_weighted_negatives() {
        let rec = GradRecord::new();
        // y = 0.8 near a peak: negative weight (1 - 0.8)^4 = 0.0016
        let mut target = Heatmap::zeros(1, 1);
        target.data[0] = 0.8;
        let pred = DiffArray::new(vec![1, 1, 1], vec![0.5]).unwrap();
        let loss = focal_loss(&rec, &pred, &target).unwrap().item().unwrap();
        let expected = 0.2f64.powi(4) * 0.25 * std::f64::consts::LN_2;
        assert!((loss - expected).abs() < 1e-12);
    }
}
