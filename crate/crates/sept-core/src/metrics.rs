//! Lane-graph evaluation: polyline distances, threshold-matched detection
//! mAP, a simplified topology edge-AP, heatmap AP, and the OLS/OLUS score
//! aggregations.

use crate::geom::{arc_length, GridSpec, Point};
use crate::ikpd::{Heatmap, Keypoint};
use crate::sdmap::resample_polyline;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("adjacency must be square of order {lanes} with 0/1 entries and zero diagonal")]
    BadAdjacency { lanes: usize },
    #[error("prediction score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("sub-metric {name} = {value} outside [0, 100]")]
    SubScoreOutOfRange { name: &'static str, value: f64 },
    #[error("matching is not injective: gt {0} matched twice")]
    NotInjective(usize),
    #[error("{what} matrix has wrong size")]
    BadMatrix { what: &'static str },
    #[error("polylines must be non-empty")]
    EmptyPolyline,
}

/// A lane centerline with an external id.
#[derive(Clone, Debug, PartialEq)]
pub struct Lane {
    pub id: i64,
    pub centerline: Vec<Point>,
}

/// Ground-truth (or predicted) lane graph: nodes are lanes, edges come from
/// a square 0/1 adjacency matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneGraph {
    pub lanes: Vec<Lane>,
    pub adjacency: Vec<u8>,
}

impl LaneGraph {
    pub fn new(lanes: Vec<Lane>, adjacency: Vec<u8>) -> Result<Self, MetricsError> {
        let n = lanes.len();
        if adjacency.len() != n * n {
            return Err(MetricsError::BadAdjacency { lanes: n });
        }
        for i in 0..n {
            for j in 0..n {
                let v = adjacency[i * n + j];
                if v > 1 || (i == j && v != 0) {
                    return Err(MetricsError::BadAdjacency { lanes: n });
                }
            }
        }
        Ok(LaneGraph { lanes, adjacency })
    }

    pub fn empty() -> Self {
        LaneGraph { lanes: Vec::new(), adjacency: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }
}

// ── polyline distances ───────────────────────────────────────────────

/// Discrete Fréchet distance via dynamic programming over the coupling
/// lattice.
pub fn frechet_distance(a: &[Point], b: &[Point]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyPolyline);
    }
    let (n, m) = (a.len(), b.len());
    let mut table = vec![0.0f64; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = a[i].dist(&b[j]);
            let reach = match (i, j) {
                (0, 0) => d,
                (_, 0) => table[(i - 1) * m].max(d),
                (0, _) => table[j - 1].max(d),
                (_, _) => {
                    let best = table[(i - 1) * m + j]
                        .min(table[(i - 1) * m + j - 1])
                        .min(table[i * m + j - 1]);
                    best.max(d)
                }
            };
            table[i * m + j] = reach;
        }
    }
    Ok(table[n * m - 1])
}

/// Densify to at most 0.5 m point spacing; single points pass through.
fn densify(points: &[Point]) -> Vec<Point> {
    if points.len() < 2 {
        return points.to_vec();
    }
    let length = arc_length(points);
    if length <= 0.0 {
        return vec![points[0]];
    }
    let n = (length / 0.5).ceil() as usize + 1;
    resample_polyline(points, n.max(2)).expect("positive length checked above")
}

/// Symmetric Chamfer distance: both polylines are densified to 0.5 m spacing,
/// then the two directed average nearest-point distances are averaged.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyPolyline);
    }
    let da = densify(a);
    let db = densify(b);
    let directed = |from: &[Point], to: &[Point]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|p| to.iter().map(|q| p.dist(q)).fold(f64::INFINITY, f64::min))
            .sum();
        total / from.len() as f64
    };
    Ok(0.5 * (directed(&da, &db) + directed(&db, &da)))
}

// ── average precision ────────────────────────────────────────────────

/// All-points interpolated AP over a confidence-ranked TP/FP sequence.
fn average_precision(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if ranked_tp.is_empty() { 1.0 } else { 0.0 };
    }
    if ranked_tp.is_empty() {
        return 0.0;
    }
    let mut recalls = Vec::with_capacity(ranked_tp.len());
    let mut precisions = Vec::with_capacity(ranked_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in ranked_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recalls.push(tp as f64 / num_gt as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope, then integrate over recall steps
    let mut envelope = precisions;
    for i in (0..envelope.len() - 1).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(&envelope) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

fn score_order(preds: &[(Vec<Point>, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b].1.partial_cmp(&preds[a].1).expect("scores validated finite").then(a.cmp(&b))
    });
    order
}

/// Greedy match in rank order: each prediction claims the nearest unmatched
/// ground truth within the threshold, in distance-matrix coordinates.
fn greedy_claim(
    order: &[usize],
    dist: &[f64],
    n_gts: usize,
    threshold: f64,
) -> Vec<Option<usize>> {
    let mut claimed = vec![false; n_gts];
    let mut matched = vec![None; order.len().max(dist.len() / n_gts.max(1))];
    for &pi in order {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n_gts {
            if claimed[j] {
                continue;
            }
            let d = dist[pi * n_gts + j];
            if d <= threshold && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            claimed[j] = true;
            matched[pi] = Some(j);
        }
    }
    matched
}

fn distance_matrix<D>(
    preds: &[(Vec<Point>, f64)],
    gts: &[Vec<Point>],
    distance: D,
) -> Result<Vec<f64>, MetricsError>
where
    D: Fn(&[Point], &[Point]) -> Result<f64, MetricsError>,
{
    for (_, score) in preds {
        if !(0.0..=1.0).contains(score) {
            return Err(MetricsError::ScoreOutOfRange(*score));
        }
    }
    let mut dist = vec![0.0f64; preds.len() * gts.len()];
    for (i, (poly, _)) in preds.iter().enumerate() {
        for (j, gt) in gts.iter().enumerate() {
            dist[i * gts.len() + j] = distance(poly, gt)?;
        }
    }
    Ok(dist)
}

/// Score-descending greedy one-to-one matching of predictions to ground
/// truths within a distance threshold.
pub fn greedy_match<D>(
    preds: &[(Vec<Point>, f64)],
    gts: &[Vec<Point>],
    threshold: f64,
    distance: D,
) -> Result<Vec<Option<usize>>, MetricsError>
where
    D: Fn(&[Point], &[Point]) -> Result<f64, MetricsError>,
{
    let dist = distance_matrix(preds, gts, distance)?;
    Ok(greedy_claim(&score_order(preds), &dist, gts.len(), threshold))
}

/// Detection mAP over distance thresholds.
///
/// Per threshold, predictions are visited in descending score order and each
/// greedily claims the nearest unmatched ground truth within the threshold;
/// the ranked TP/FP sequence then yields all-points interpolated AP. The
/// final value is the mean over thresholds, as a percentage.
pub fn detection_map<D>(
    preds: &[(Vec<Point>, f64)],
    gts: &[Vec<Point>],
    thresholds: &[f64],
    distance: D,
) -> Result<f64, MetricsError>
where
    D: Fn(&[Point], &[Point]) -> Result<f64, MetricsError>,
{
    if thresholds.is_empty() {
        return Err(MetricsError::BadMatrix { what: "thresholds" });
    }
    let dist = distance_matrix(preds, gts, distance)?;
    let order = score_order(preds);
    let mut total = 0.0;
    for &thr in thresholds {
        let matched = greedy_claim(&order, &dist, gts.len(), thr);
        let ranked_tp: Vec<bool> = order.iter().map(|&pi| matched[pi].is_some()).collect();
        total += average_precision(&ranked_tp, gts.len());
    }
    Ok(100.0 * total / thresholds.len() as f64)
}

/// Simplified topology score: AP over predicted edges under a fixed injective
/// node matching.
///
/// Edges with positive score are ranked descending; edge (i, j) is a true
/// positive when both endpoints are matched and the matched ground-truth
/// nodes are adjacent. The recall denominator is the number of ground-truth
/// edges whose endpoints are both matched.
pub fn top_score(
    matching: &[Option<usize>],
    pred_adj: &[f64],
    gt_adj: &[u8],
    gt_order: usize,
) -> Result<f64, MetricsError> {
    let n = matching.len();
    if pred_adj.len() != n * n {
        return Err(MetricsError::BadMatrix { what: "pred_adj" });
    }
    if gt_adj.len() != gt_order * gt_order {
        return Err(MetricsError::BadMatrix { what: "gt_adj" });
    }
    let mut seen = vec![false; gt_order];
    for m in matching.iter().flatten() {
        if *m >= gt_order {
            return Err(MetricsError::BadMatrix { what: "matching" });
        }
        if seen[*m] {
            return Err(MetricsError::NotInjective(*m));
        }
        seen[*m] = true;
    }

    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && pred_adj[i * n + j] > 0.0 {
                edges.push((i, j, pred_adj[i * n + j]));
            }
        }
    }
    edges.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).expect("finite scores").then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });

    let num_gt = (0..gt_order)
        .flat_map(|u| (0..gt_order).map(move |v| (u, v)))
        .filter(|&(u, v)| u != v && gt_adj[u * gt_order + v] == 1 && seen[u] && seen[v])
        .count();
    if num_gt == 0 {
        return Ok(100.0);
    }

    let ranked_tp: Vec<bool> = edges
        .iter()
        .map(|&(i, j, _)| match (matching[i], matching[j]) {
            (Some(u), Some(v)) => gt_adj[u * gt_order + v] == 1,
            _ => false,
        })
        .collect();
    Ok(100.0 * average_precision(&ranked_tp, num_gt))
}

// ── score aggregation ────────────────────────────────────────────────

fn check_percentage(name: &'static str, value: f64) -> Result<(), MetricsError> {
    if !(0.0..=100.0).contains(&value) {
        return Err(MetricsError::SubScoreOutOfRange { name, value });
    }
    Ok(())
}

/// Square-root adjustment of a topology percentage: 100 * sqrt(x / 100).
fn sqrt_adjusted(x: f64) -> f64 {
    100.0 * (x / 100.0).sqrt()
}

/// Centerline-benchmark aggregate of four sub-metrics (all percentages):
/// mean of the two detection scores and the square-root-adjusted topology
/// scores.
pub fn ols(det_l: f64, det_t: f64, top_ll: f64, top_lt: f64) -> Result<f64, MetricsError> {
    check_percentage("det_l", det_l)?;
    check_percentage("det_t", det_t)?;
    check_percentage("top_ll", top_ll)?;
    check_percentage("top_lt", top_lt)?;
    Ok((det_l + det_t + sqrt_adjusted(top_ll) + sqrt_adjusted(top_lt)) / 4.0)
}

/// Lane-segment-benchmark aggregate of five sub-metrics; same procedure as
/// [`ols`] with an equal-weight mean.
pub fn olus(
    det_ls: f64,
    det_a: f64,
    det_te: f64,
    top_lsls: f64,
    top_lste: f64,
) -> Result<f64, MetricsError> {
    check_percentage("det_ls", det_ls)?;
    check_percentage("det_a", det_a)?;
    check_percentage("det_te", det_te)?;
    check_percentage("top_lsls", top_lsls)?;
    check_percentage("top_lste", top_lste)?;
    Ok((det_ls + det_a + det_te + sqrt_adjusted(top_lsls) + sqrt_adjusted(top_lste)) / 5.0)
}

// ── heatmap scoring ──────────────────────────────────────────────────

/// AP for a predicted keypoint heatmap.
///
/// Local maxima over 3x3 neighborhoods (positive values only) are ranked by
/// value; a peak is a true positive when it lies within `radius` cells of an
/// unclaimed ground-truth keypoint.
pub fn heatmap_ap(pred: &Heatmap, gts: &[Keypoint], grid: &GridSpec, radius: f64) -> f64 {
    let (h, w) = (pred.h, pred.w);
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = pred.data[r * w + c];
            if v <= 0.0 {
                continue;
            }
            let mut is_peak = true;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    if pred.data[nr as usize * w + nc as usize] > v {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                peaks.push((v, r, c));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("heatmap values finite").then((a.1, a.2).cmp(&(b.1, b.2))));

    if gts.is_empty() {
        return if peaks.is_empty() { 100.0 } else { 0.0 };
    }

    let gt_coords: Vec<(f64, f64)> = gts.iter().map(|k| grid.grid_coord(&k.position)).collect();
    let mut claimed = vec![false; gts.len()];
    let ranked_tp: Vec<bool> = peaks
        .iter()
        .map(|&(_, r, c)| {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut best: Option<(usize, f64)> = None;
            for (gi, &(gr, gc)) in gt_coords.iter().enumerate() {
                if claimed[gi] {
                    continue;
                }
                let d = ((pr - gr).powi(2) + (pc - gc).powi(2)).sqrt();
                if d <= radius && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((gi, d));
                }
            }
            if let Some((gi, _)) = best {
                claimed[gi] = true;
                true
            } else {
                false
            }
        })
        .collect();
    100.0 * average_precision(&ranked_tp, gts.len())
}

// ── report ───────────────────────────────────────────────────────────

/// Sub-scores plus aggregates, with the thresholds that produced them.
/// Aggregates are populated only when every contributing sub-metric is set.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub det_l: Option<f64>,
    pub det_t: Option<f64>,
    pub top_ll: Option<f64>,
    pub top_lt: Option<f64>,
    pub det_ls: Option<f64>,
    pub det_a: Option<f64>,
    pub det_te: Option<f64>,
    pub top_lsls: Option<f64>,
    pub top_lste: Option<f64>,
    pub ols: Option<f64>,
    pub olus: Option<f64>,
    /// Matching thresholds (meters) behind any detection sub-metric.
    pub thresholds: Vec<f64>,
    /// Protocol label carried through for externally supplied scores
    /// (for example "v1.0" or "v1.1").
    pub version_label: Option<String>,
}

impl MetricsReport {
    /// Report over the four centerline sub-metrics; computes the aggregate.
    pub fn from_ols_inputs(
        det_l: f64,
        det_t: f64,
        top_ll: f64,
        top_lt: f64,
    ) -> Result<Self, MetricsError> {
        let aggregate = ols(det_l, det_t, top_ll, top_lt)?;
        Ok(MetricsReport {
            det_l: Some(det_l),
            det_t: Some(det_t),
            top_ll: Some(top_ll),
            top_lt: Some(top_lt),
            ols: Some(aggregate),
            ..Default::default()
        })
    }

    /// Report over the five lane-segment sub-metrics; computes the aggregate.
    pub fn from_olus_inputs(
        det_ls: f64,
        det_a: f64,
        det_te: f64,
        top_lsls: f64,
        top_lste: f64,
    ) -> Result<Self, MetricsError> {
        let aggregate = olus(det_ls, det_a, det_te, top_lsls, top_lste)?;
        Ok(MetricsReport {
            det_ls: Some(det_ls),
            det_a: Some(det_a),
            det_te: Some(det_te),
            top_lsls: Some(top_lsls),
            top_lste: Some(top_lste),
            olus: Some(aggregate),
            ..Default::default()
        })
    }
}
