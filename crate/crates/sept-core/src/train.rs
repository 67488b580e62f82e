//! Training and evaluation harness: dataset preparation from a manifest,
//! plain stochastic gradient descent on the combined segmentation + keypoint
//! loss, occupancy IoU / heatmap AP evaluation, and the ablation matrix.

use crate::geom::GridSpec;
use crate::ikpd::{extract_intersections, focal_loss, render_heatmap, Heatmap, Keypoint};
use crate::metrics::heatmap_ap;
use crate::model::{Model, ModelError, ModelOutput, RunConfig, SceneInputs};
use crate::raster::{rasterize, RasterError};
use crate::rng::{fnv1a64, mix, SplitMix64};
use crate::sdmap::{parse_scene, perturb, SceneError};
use crate::synth::{centerline_raster, render_observation, Manifest};
use crate::tensor::{ops, DiffArray, GradRecord, TensorError};
use crate::vector::tokenize;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no scenes in split {0:?}")]
    EmptySplit(String),
    #[error("scene {id} window differs from the dataset window")]
    WindowMismatch { id: String },
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
}

/// Everything precomputed for one scene.
pub struct PreparedScene {
    pub id: String,
    pub obs: DiffArray,
    pub raster: DiffArray,
    pub tokens: crate::vector::SegmentTokens,
    pub occupancy_target: Vec<f64>,
    pub heatmap_target: Heatmap,
    pub keypoints: Vec<Keypoint>,
}

pub struct Dataset {
    pub grid: GridSpec,
    pub scenes: Vec<PreparedScene>,
}

/// Load a split, applying the configured SD-map perturbation and observation
/// noise per scene (seeded from the run seed and the scene id).
pub fn load_split(config: &RunConfig, split: &str) -> Result<Dataset, TrainError> {
    let manifest_path = config.data_dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| TrainError::Manifest(format!("{}: {e}", manifest_path.display())))?,
    )
    .map_err(|e| TrainError::Manifest(e.to_string()))?;

    let vector_cfg = crate::model::VectorConfig::default();
    let mut grid: Option<GridSpec> = None;
    let mut scenes = Vec::new();
    for entry in manifest.scenes.iter().filter(|e| e.split == split) {
        let text = std::fs::read_to_string(config.data_dir.join(&entry.file))?;
        let mut scene = parse_scene(&text)?;
        let scene_tag = fnv1a64(scene.id.as_bytes());
        if config.sigma_t > 0.0 || config.sigma_theta > 0.0 {
            scene.sd_map = perturb(
                &scene.sd_map,
                mix(config.seed ^ scene_tag, 0x9e21),
                config.sigma_t,
                config.sigma_theta,
            );
        }
        let scene_grid = GridSpec::with_default_cell(scene.sd_map.window);
        match grid {
            None => grid = Some(scene_grid),
            Some(g) if g == scene_grid => {}
            Some(_) => return Err(TrainError::WindowMismatch { id: scene.id.clone() }),
        }
        let keypoints = extract_intersections(&scene.sd_map);
        scenes.push(PreparedScene {
            obs: render_observation(
                &scene,
                &scene_grid,
                config.noise_p,
                mix(config.seed ^ scene_tag, 0x0b5e),
            ),
            raster: rasterize(&scene.sd_map, &scene_grid)?.to_array(),
            tokens: tokenize(&scene.sd_map, vector_cfg.m, vector_cfg.p, vector_cfg.l_max),
            occupancy_target: centerline_raster(&scene, &scene_grid),
            heatmap_target: render_heatmap(&keypoints, &scene_grid, config.sigma),
            keypoints,
            id: scene.id,
        });
    }
    let grid = grid.ok_or_else(|| TrainError::EmptySplit(split.to_string()))?;
    Ok(Dataset { grid, scenes })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub l_seg: f64,
    pub l_ikpd: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalLog {
    pub step: usize,
    pub occupancy_iou: f64,
    pub heatmap_ap: f64,
}

/// Per-run log; all content is derived from the config and seed, so rerunning
/// an identical config reproduces it bit-exactly.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
}

/// Mean binary cross-entropy between an occupancy prediction in (0, 1) and a
/// binary target raster.
pub fn bce_loss(
    rec: &GradRecord,
    pred: &DiffArray,
    target: &[f64],
) -> Result<DiffArray, TensorError> {
    debug_assert_eq!(pred.len(), target.len());
    let shape = pred.shape().to_vec();
    let pos = DiffArray::new(shape.clone(), target.to_vec())?;
    let neg = DiffArray::new(shape, target.iter().map(|y| 1.0 - y).collect())?;
    let p = ops::clamp_value(rec, pred, 1e-7, 1.0 - 1e-7)?;
    let log_p = ops::ln(rec, &p)?;
    let log_q = ops::ln(rec, &ops::affine(rec, &p, -1.0, 1.0)?)?;
    let terms = ops::add(rec, &ops::mul(rec, &pos, &log_p)?, &ops::mul(rec, &neg, &log_q)?)?;
    ops::scale(rec, &ops::mean(rec, &terms)?, -1.0)
}

fn scene_inputs(scene: &PreparedScene, grid: GridSpec) -> SceneInputs {
    SceneInputs {
        obs: scene.obs.clone(),
        raster: scene.raster.clone(),
        tokens: scene.tokens.clone(),
        grid,
    }
}

/// Train with plain SGD over the manifest's train split.
///
/// The loss is the occupancy segmentation cross-entropy plus the keypoint
/// focal loss when the variant has the keypoint head. Scene order reshuffles
/// deterministically per epoch from the run seed. Aborts with the offending
/// step if the loss goes non-finite. A final evaluation over the val split
/// (when present) is appended to the log.
pub fn train(config: &RunConfig) -> Result<(Model, TrainLog), TrainError> {
    let dataset = load_split(config, "train")?;
    let mut model = Model::build(config)?;
    let mut log = TrainLog {
        seed: config.seed,
        config_hash: format!("{:016x}", config.hash()),
        steps: Vec::with_capacity(config.steps),
        evals: Vec::new(),
    };

    let mut order: Vec<usize> = (0..dataset.scenes.len()).collect();
    let mut order_rng = SplitMix64::new(mix(config.seed, 0x07de7));
    order_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    for step in 0..config.steps {
        if cursor == order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let scene = &dataset.scenes[order[cursor]];
        cursor += 1;

        let rec = GradRecord::new();
        let leaves = model.params.leaves(&rec);
        let out = model.forward(&rec, &leaves, &scene_inputs(scene, dataset.grid))?;
        let l_seg = bce_loss(&rec, &out.occupancy, &scene.occupancy_target)?;
        let (total, l_seg_v, l_ikpd_v) = match &out.heatmap {
            Some(hm) => {
                let l_ikpd = focal_loss(&rec, hm, &scene.heatmap_target)?;
                let total = ops::add(&rec, &l_seg, &l_ikpd)?;
                (total, l_seg.item().unwrap(), l_ikpd.item().unwrap())
            }
            None => (l_seg.clone(), l_seg.item().unwrap(), 0.0),
        };
        let total_v = total.item().unwrap();
        if !total_v.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        log.steps.push(StepLog { step, total: total_v, l_seg: l_seg_v, l_ikpd: l_ikpd_v });

        let grads = rec.backward(&total)?;
        if config.learning_rate > 0.0 {
            // clip the global gradient norm: the keypoint focal term is
            // normalized by the positive count, so its magnitude spikes on
            // scenes the model currently gets wrong
            let mut scale = 1.0;
            if config.clip_norm > 0.0 {
                let mut sq = 0.0;
                for (_, leaf) in leaves.iter() {
                    let grad = grads.wrt(leaf).expect("leaf registered");
                    sq += grad.data().iter().map(|g| g * g).sum::<f64>();
                }
                let norm = sq.sqrt();
                if norm > config.clip_norm {
                    scale = config.clip_norm / norm;
                }
            }
            for (name, leaf) in leaves.iter() {
                let grad = grads.wrt(leaf).expect("leaf registered");
                let value = model.params.get_mut(name).expect("same name set");
                for (w, g) in value.data_mut().iter_mut().zip(grad.data()) {
                    *w -= config.learning_rate * scale * g;
                }
            }
        }
    }

    if let Ok(val) = load_split(config, "val") {
        let report = evaluate(&model, &val)?;
        log.evals.push(EvalLog {
            step: config.steps,
            occupancy_iou: report.occupancy_iou,
            heatmap_ap: report.heatmap_ap,
        });
    }
    Ok((model, log))
}

/// Occupancy IoU (percentage) at a probability threshold. An empty union
/// counts as a perfect 100.
pub fn occupancy_iou(pred: &[f64], target: &[f64], threshold: f64) -> f64 {
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &y) in pred.iter().zip(target) {
        let hit = p > threshold;
        let truth = y != 0.0;
        if hit && truth {
            intersection += 1;
        }
        if hit || truth {
            union += 1;
        }
    }
    if union == 0 {
        100.0
    } else {
        100.0 * intersection as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct EvalReport {
    pub occupancy_iou: f64,
    pub heatmap_ap: f64,
}

/// Evaluate a model over a dataset: mean occupancy IoU at threshold 0.5 and
/// mean heatmap AP at radius 2 cells (variants without the keypoint head
/// score a zero heatmap).
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport, TrainError> {
    let mut iou_sum = 0.0;
    let mut ap_sum = 0.0;
    for scene in &dataset.scenes {
        let out = forward_inference(model, scene, dataset.grid)?;
        iou_sum += occupancy_iou(out.occupancy.data(), &scene.occupancy_target, 0.5);
        let predicted = match &out.heatmap {
            Some(hm) => Heatmap::from_array(hm).expect("head emits [H, W, 1]"),
            None => Heatmap::zeros(dataset.grid.rows(), dataset.grid.cols()),
        };
        ap_sum += heatmap_ap(&predicted, &scene.keypoints, &dataset.grid, 2.0);
    }
    let n = dataset.scenes.len().max(1) as f64;
    Ok(EvalReport { occupancy_iou: iou_sum / n, heatmap_ap: ap_sum / n })
}

fn forward_inference(
    model: &Model,
    scene: &PreparedScene,
    grid: GridSpec,
) -> Result<ModelOutput, TrainError> {
    // fresh record per forward; nothing is recorded since parameters enter
    // as plain constants
    let rec = GradRecord::new();
    let leaves = model.params.constants();
    Ok(model.forward(&rec, &leaves, &scene_inputs(scene, grid))?)
}

// ── ablation matrix ──────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub iou: f64,
    pub heatmap_ap: f64,
}

/// Labelled configurations for the standard ablation: the five model
/// variants plus the feature-transform on/off pair under 1 m translation and
/// 0.02 rad rotation SD-map misalignment.
pub fn default_ablation_matrix(base: &RunConfig) -> Vec<(String, RunConfig)> {
    use crate::model::Variant;
    let with_variant = |variant: Variant| {
        let mut cfg = base.clone();
        cfg.variant = variant;
        cfg
    };
    let mut rows: Vec<(String, RunConfig)> = [
        Variant::Baseline,
        Variant::RasterOnly,
        Variant::VectorOnly,
        Variant::Hybrid,
        Variant::HybridIkpd,
    ]
    .into_iter()
    .map(|v| (v.as_str().to_string(), with_variant(v)))
    .collect();

    let mut ft_on = with_variant(Variant::RasterOnly);
    ft_on.sigma_t = 1.0;
    ft_on.sigma_theta = 0.02;
    ft_on.ft_enabled = true;
    rows.push(("raster_only_ft_perturbed".to_string(), ft_on));
    let mut ft_off = with_variant(Variant::RasterOnly);
    ft_off.sigma_t = 1.0;
    ft_off.sigma_theta = 0.02;
    ft_off.ft_enabled = false;
    rows.push(("raster_only_noft_perturbed".to_string(), ft_off));
    rows
}

/// Train every (variant, seed) pair and report one row per run, in the given
/// order. Runs are independent; the output is deterministic in the configs.
pub fn ablate(matrix: &[(String, RunConfig)], seeds: &[u64]) -> Result<Vec<AblationRow>, TrainError> {
    assert!(matrix.len() >= 2, "an ablation needs at least two variants");
    let mut rows = Vec::with_capacity(matrix.len() * seeds.len());
    for (label, config) in matrix {
        for &seed in seeds {
            let mut run = config.clone();
            run.seed = seed;
            let (model, _log) = train(&run)?;
            let val = load_split(&run, "val")?;
            let report = evaluate(&model, &val)?;
            rows.push(AblationRow {
                variant: label.clone(),
                seed,
                iou: report.occupancy_iou,
                heatmap_ap: report.heatmap_ap,
            });
        }
    }
    Ok(rows)
}

/// Fixed-schema CSV for ablation rows: variant,seed,iou,heatmap_ap.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,iou,heatmap_ap\n");
    for row in rows {
        out.push_str(&format!("{},{},{:.4},{:.4}\n", row.variant, row.seed, row.iou, row.heatmap_ap));
    }
    out
}

/// Mean and half-spread (max minus min over seeds, halved) per variant,
/// preserving first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<(String, f64, f64, f64, f64)> {
    let mut order: Vec<String> = Vec::new();
    for row in rows {
        if !order.contains(&row.variant) {
            order.push(row.variant.clone());
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let group: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == variant).collect();
            let n = group.len() as f64;
            let mean_iou = group.iter().map(|r| r.iou).sum::<f64>() / n;
            let mean_ap = group.iter().map(|r| r.heatmap_ap).sum::<f64>() / n;
            let spread = |f: fn(&AblationRow) -> f64| {
                let hi = group.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
                let lo = group.iter().map(|r| f(r)).fold(f64::INFINITY, f64::min);
                (hi - lo) / 2.0
            };
            (variant, mean_iou, spread(|r| r.iou), mean_ap, spread(|r| r.heatmap_ap))
        })
        .collect()
}

/// Write a dataset of synthetic scenes plus its manifest (one JSON per
/// scene). Returns the manifest.
pub fn write_dataset(
    out_dir: &Path,
    base: &crate::synth::SynthParams,
    count: usize,
    seed: u64,
) -> Result<Manifest, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let mut ids = Vec::with_capacity(count);
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let mut params = *base;
        params.seed = mix(seed, i as u64);
        let scene = crate::synth::generate_scene(&params)
            .map_err(|e| TrainError::Manifest(e.to_string()))?;
        let file = format!("{}.json", scene.id);
        std::fs::write(out_dir.join(&file), crate::sdmap::serialize_scene(&scene))?;
        ids.push(scene.id.clone());
        files.push(file);
    }
    let splits = crate::synth::assign_splits(&ids, seed);
    let manifest = Manifest {
        scenes: ids
            .into_iter()
            .zip(files)
            .zip(splits)
            .map(|((id, file), split)| crate::synth::ManifestEntry {
                id,
                file,
                split: split.to_string(),
            })
            .collect(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}
