//! Subcommand implementations.

use crate::{graphs, Failure};
use sept_core::geom::{GridSpec, Window};
use sept_core::ikpd::{extract_intersections, render_heatmap, KeypointKind};
use sept_core::metrics::{ols, olus};
use sept_core::model::{Model, RunConfig};
use sept_core::raster::rasterize;
use sept_core::sdmap::parse_scene;
use sept_core::synth::{Manifest, SynthParams};
use sept_core::tensor::Params;
use sept_core::train::{
    ablate as run_ablation, ablation_csv, default_ablation_matrix, evaluate, load_split,
    summarize, train as run_training, write_dataset,
};
use sept_core::vector::tokenize;
use serde_json::json;
use std::path::Path;

#[allow(clippy::too_many_arguments)]
pub fn gen(
    out: &Path,
    scenes: usize,
    seed: u64,
    occlusion: f64,
    drop_sd: f64,
    window: &[f64],
    sigma_t: f64,
    sigma_theta: f64,
    n_roads: usize,
    grid_spacing: f64,
) -> Result<(), Failure> {
    let window = Window::new(window[0], window[1], window[2], window[3])
        .ok_or_else(|| Failure::validation("window extents must be positive"))?;
    let mut params = SynthParams::new(window);
    params.occlusion_fraction = occlusion;
    params.drop_sd_edge_prob = drop_sd;
    params.sigma_t = sigma_t;
    params.sigma_theta = sigma_theta;
    params.n_roads = n_roads;
    params.grid_spacing = grid_spacing;
    params.validate().map_err(Failure::validation)?;
    let manifest = write_dataset(out, &params, scenes, seed)?;
    let train_count = manifest.scenes.iter().filter(|e| e.split == "train").count();
    let val_count = manifest.scenes.len() - train_count;
    println!("wrote {} scenes to {} ({} train / {} val)", manifest.scenes.len(), out.display(), train_count, val_count);
    Ok(())
}

pub fn prep(scenes_dir: &Path, out: &Path, sigma: f64) -> Result<(), Failure> {
    let manifest: Manifest = serde_json::from_str(
        &std::fs::read_to_string(scenes_dir.join("manifest.json"))
            .map_err(|e| Failure::validation(format!("manifest: {e}")))?,
    )
    .map_err(|e| Failure::validation(format!("manifest: {e}")))?;
    std::fs::create_dir_all(out)?;
    for entry in &manifest.scenes {
        let text = std::fs::read_to_string(scenes_dir.join(&entry.file))?;
        let scene = parse_scene(&text).map_err(Failure::validation)?;
        let grid = GridSpec::with_default_cell(scene.sd_map.window);

        let tile = rasterize(&scene.sd_map, &grid).map_err(Failure::validation)?;
        tile.export_pgm(out, &format!("{}_raster", scene.id))?;

        let tokens = tokenize(&scene.sd_map, 32, 11, 25.0);
        let token_dump = json!({
            "dropped": tokens.dropped,
            "tokens": (0..tokens.m).map(|t| {
                let pts: Vec<[f64; 2]> = (0..tokens.p)
                    .map(|i| [tokens.points[(t * tokens.p + i) * 2], tokens.points[(t * tokens.p + i) * 2 + 1]])
                    .collect();
                let category = ["road", "crosswalk", "sidewalk"]
                    .iter()
                    .enumerate()
                    .find(|(c, _)| tokens.category[t * 3 + c] == 1.0)
                    .map(|(_, name)| *name);
                json!({ "points": pts, "category": category, "mask": tokens.mask[t] })
            }).collect::<Vec<_>>(),
        });
        std::fs::write(
            out.join(format!("{}_tokens.json", scene.id)),
            serde_json::to_string_pretty(&token_dump).expect("token dump serializes"),
        )?;

        let keypoints = extract_intersections(&scene.sd_map);
        let kp_dump: Vec<_> = keypoints
            .iter()
            .map(|k| {
                json!({
                    "x": k.position.x,
                    "y": k.position.y,
                    "kind": match k.kind {
                        KeypointKind::Junction => "junction",
                        KeypointKind::Crossing => "crossing",
                    },
                })
            })
            .collect();
        std::fs::write(
            out.join(format!("{}_keypoints.json", scene.id)),
            serde_json::to_string_pretty(&kp_dump).expect("keypoints serialize"),
        )?;

        let heatmap = render_heatmap(&keypoints, &grid, sigma);
        heatmap.export_pgm(&out.join(format!("{}_heatmap.pgm", scene.id)))?;
    }
    println!("prepared {} scenes into {}", manifest.scenes.len(), out.display());
    Ok(())
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let config = RunConfig::from_json(&text)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    config.validate().map_err(Failure::validation)?;
    Ok(config)
}

pub fn train(config_path: &Path, out: &Path) -> Result<(), Failure> {
    let config = read_config(config_path)?;
    let (model, log) = run_training(&config)?;
    std::fs::create_dir_all(out)?;
    model
        .params
        .save(&out.join("checkpoint.septckpt"))
        .map_err(Failure::validation)?;
    std::fs::write(
        out.join("trainlog.json"),
        serde_json::to_string_pretty(&log).expect("log serializes"),
    )?;
    let first = log.steps.first().map(|s| s.total).unwrap_or(0.0);
    let last = log.steps.last().map(|s| s.total).unwrap_or(0.0);
    println!(
        "trained {} ({} params, {} steps): loss {first:.4} -> {last:.4}",
        config.variant.as_str(),
        model.param_count(),
        log.steps.len()
    );
    if let Some(eval) = log.evals.last() {
        println!("val occupancy IoU {:.2}, heatmap AP {:.2}", eval.occupancy_iou, eval.heatmap_ap);
    }
    Ok(())
}

pub fn eval(config_path: &Path, ckpt: &Path) -> Result<(), Failure> {
    let config = read_config(config_path)?;
    let mut model = Model::build(&config).map_err(Failure::validation)?;
    let params = Params::load(ckpt).map_err(Failure::validation)?;
    model.load_params(params).map_err(Failure::validation)?;
    let dataset = load_split(&config, "val")?;
    let report = evaluate(&model, &dataset)?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(())
}

pub fn ablate(config_path: &Path, out_csv: &Path, seeds: &[u64]) -> Result<(), Failure> {
    if seeds.is_empty() {
        return Err(Failure::validation("at least one seed required"));
    }
    let base = read_config(config_path)?;
    let matrix = default_ablation_matrix(&base);
    let rows = run_ablation(&matrix, seeds)?;
    std::fs::write(out_csv, ablation_csv(&rows))?;
    println!("variant mean_iou (±spread) mean_heatmap_ap (±spread)");
    for (variant, iou, iou_spread, ap, ap_spread) in summarize(&rows) {
        println!("{variant}: {iou:.2} (±{iou_spread:.2}) {ap:.2} (±{ap_spread:.2})");
    }
    println!("wrote {}", out_csv.display());
    Ok(())
}

pub fn metrics(
    csv: Option<&Path>,
    require_olus: bool,
    pred_graph: Option<&Path>,
    gt_graph: Option<&Path>,
    thresholds: &[f64],
) -> Result<(), Failure> {
    match (csv, pred_graph, gt_graph) {
        (Some(csv), None, None) => metrics_csv(csv, require_olus),
        (None, Some(pred), Some(gt)) => graphs::evaluate_graphs(pred, gt, thresholds),
        _ => Err(Failure::validation(
            "provide either --csv FILE or both --pred-graph and --gt-graph",
        )),
    }
}

fn metrics_csv(path: &Path, require_olus: bool) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Failure::validation("empty CSV"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let is_ols = columns == ["det_l", "det_t", "top_ll", "top_lt"];
    let is_olus = columns == ["det_ls", "det_a", "det_te", "top_lsls", "top_lste"];
    if !is_ols && !is_olus {
        return Err(Failure::validation(format!("unrecognized CSV header {header:?}")));
    }
    if require_olus && !is_olus {
        return Err(Failure::validation(
            "--olus requires the det_ls,det_a,det_te,top_lsls,top_lste header",
        ));
    }
    for (line_no, line) in lines.enumerate() {
        let values: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let values =
            values.map_err(|e| Failure::validation(format!("row {}: {e}", line_no + 2)))?;
        if values.len() != columns.len() {
            return Err(Failure::validation(format!(
                "row {} has {} values, expected {}",
                line_no + 2,
                values.len(),
                columns.len()
            )));
        }
        let score = if is_ols {
            ols(values[0], values[1], values[2], values[3])
        } else {
            olus(values[0], values[1], values[2], values[3], values[4])
        }
        .map_err(Failure::validation)?;
        println!("{score:.1}");
    }
    Ok(())
}

pub fn gradcheck() -> Result<(), Failure> {
    let results = sept_core::gradsuite::run_full_suite().map_err(Failure::numeric)?;
    let mut failed = 0;
    for result in &results {
        let status = if result.passed() { "PASS" } else { "FAIL" };
        println!("{:<24} max_rel_err={:<12.3e} {status}", result.name, result.max_rel_err);
        if !result.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::numeric(format!("{failed} gradient checks failed")));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}
