//! Lane-graph file evaluation: detection mAP over Fréchet distance plus the
//! simplified topology edge-AP under a greedy matching.
//!
//! Graph files use the scene file's lane-graph sub-schema:
//! `{"lanes": [{"id": int, "centerline": [[x, y], ...], "score"?: float}],
//!   "adjacency": [[...]]}`. Prediction scores default to 1.0; adjacency
//! entries may be fractional scores on the prediction side.

use crate::Failure;
use sept_core::geom::Point;
use sept_core::metrics::{detection_map, frechet_distance, greedy_match, top_score};
use serde_json::{json, Value};
use std::path::Path;

struct GraphFile {
    lanes: Vec<(Vec<Point>, f64)>,
    adjacency: Vec<f64>,
}

fn read_graph(path: &Path) -> Result<GraphFile, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let lanes_raw = value
        .get("lanes")
        .and_then(Value::as_array)
        .ok_or_else(|| Failure::validation("graph file needs a lanes array"))?;
    let mut lanes = Vec::with_capacity(lanes_raw.len());
    for lane in lanes_raw {
        let centerline = lane
            .get("centerline")
            .and_then(Value::as_array)
            .ok_or_else(|| Failure::validation("lane needs a centerline"))?;
        let mut points = Vec::with_capacity(centerline.len());
        for pair in centerline {
            let xy = pair
                .as_array()
                .filter(|p| p.len() == 2)
                .ok_or_else(|| Failure::validation("centerline points are [x, y] pairs"))?;
            points.push(Point::new(
                xy[0].as_f64().ok_or_else(|| Failure::validation("coordinates are numbers"))?,
                xy[1].as_f64().ok_or_else(|| Failure::validation("coordinates are numbers"))?,
            ));
        }
        let score = lane.get("score").and_then(Value::as_f64).unwrap_or(1.0);
        lanes.push((points, score));
    }
    let n = lanes.len();
    let adj_raw = value
        .get("adjacency")
        .and_then(Value::as_array)
        .ok_or_else(|| Failure::validation("graph file needs an adjacency matrix"))?;
    if adj_raw.len() != n {
        return Err(Failure::validation(format!(
            "adjacency has {} rows for {} lanes",
            adj_raw.len(),
            n
        )));
    }
    let mut adjacency = vec![0.0; n * n];
    for (i, row) in adj_raw.iter().enumerate() {
        let row = row
            .as_array()
            .filter(|r| r.len() == n)
            .ok_or_else(|| Failure::validation("adjacency must be square"))?;
        for (j, v) in row.iter().enumerate() {
            adjacency[i * n + j] =
                v.as_f64().ok_or_else(|| Failure::validation("adjacency entries are numbers"))?;
        }
    }
    Ok(GraphFile { lanes, adjacency })
}

pub fn evaluate_graphs(pred_path: &Path, gt_path: &Path, thresholds: &[f64]) -> Result<(), Failure> {
    let pred = read_graph(pred_path)?;
    let gt = read_graph(gt_path)?;
    let gt_lanes: Vec<Vec<Point>> = gt.lanes.iter().map(|(points, _)| points.clone()).collect();

    let det_l = detection_map(&pred.lanes, &gt_lanes, thresholds, |a, b| frechet_distance(a, b))
        .map_err(Failure::validation)?;

    // the topology matching is taken at the loosest detection threshold
    let match_threshold = thresholds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let matching = greedy_match(&pred.lanes, &gt_lanes, match_threshold, |a, b| {
        frechet_distance(a, b)
    })
    .map_err(Failure::validation)?;
    let gt_adjacency: Vec<u8> = gt.adjacency.iter().map(|&v| if v > 0.0 { 1 } else { 0 }).collect();
    let top_ll = top_score(&matching, &pred.adjacency, &gt_adjacency, gt_lanes.len())
        .map_err(Failure::validation)?;

    let report = json!({
        "det_l": det_l,
        "top_ll": top_ll,
        "thresholds": thresholds,
        "matched": matching.iter().filter(|m| m.is_some()).count(),
        "predictions": pred.lanes.len(),
        "ground_truth": gt_lanes.len(),
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
