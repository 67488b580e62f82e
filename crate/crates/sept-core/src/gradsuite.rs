//! The full gradient verification suite: every differentiable kernel and
//! every learned module is checked against central differences over seeds
//! 0..9, at 64-bit precision with eps = 1e-5.

use crate::dgff::{Dgff, FusionWeights};
use crate::geom::{GridSpec, Point, Window};
use crate::ikpd::{focal_loss, render_heatmap, Heatmap, IkpdHead, Keypoint, KeypointKind};
use crate::model::{Model, RunConfig, SceneInputs, Variant, VectorConfig};
use crate::raster::{film_modulate, FeatureTransform, RasterEncoder};
use crate::rng::SplitMix64;
use crate::sdmap::{Category, LocalMap, Polyline};
use crate::synth::ObsEncoder;
use crate::tensor::{grad_check_multi, ops, DiffArray, GradRecord, Params, TensorError};
use crate::train::bce_loss;
use crate::vector::{tokenize, BevCrossAttention, SegmentTokens, VectorEncoder};

pub const SUITE_EPS: f64 = 1e-5;
/// Composite-module checks use a larger step: their attention paths push
/// central differences onto the roundoff floor at 1e-5.
pub const SUITE_EPS_MODULES: f64 = 1e-4;
pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_SEEDS: std::ops::Range<u64> = 0..10;

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < SUITE_TOLERANCE
    }
}

fn random_array(rng: &mut SplitMix64, shape: Vec<usize>) -> DiffArray {
    let n: usize = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| rng.next_gaussian()).collect()).expect("consistent")
}

/// Gaussian samples kept away from relu/clamp kinks so central differences
/// stay two-sided.
fn random_array_off_kinks(rng: &mut SplitMix64, shape: Vec<usize>) -> DiffArray {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.next_gaussian();
            if v.abs() < 1e-3 {
                v + 0.002 * v.signum() + if v == 0.0 { 0.002 } else { 0.0 }
            } else {
                v
            }
        })
        .collect();
    DiffArray::new(shape, data).expect("consistent")
}

fn max_over_seeds<F>(mut case: F) -> Result<f64, TensorError>
where
    F: FnMut(u64) -> Result<f64, TensorError>,
{
    let mut worst = 0.0f64;
    for seed in SUITE_SEEDS {
        worst = worst.max(case(seed)?);
    }
    Ok(worst)
}

fn kernel_checks(results: &mut Vec<GradCheckResult>) -> Result<(), TensorError> {
    let push = |results: &mut Vec<GradCheckResult>, name: &'static str, err: f64| {
        results.push(GradCheckResult { name, max_rel_err: err });
    };

    let dims = |rng: &mut SplitMix64| (2 + rng.next_index(4), 2 + rng.next_index(4));

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let (n, k) = dims(&mut rng);
        let (_, m) = dims(&mut rng);
        let a = random_array(&mut rng, vec![n, k]);
        let b = random_array(&mut rng, vec![k, m]);
        grad_check_multi(
            |rec, xs| ops::sum(rec, &ops::matmul(rec, &xs[0], &xs[1])?),
            &[a, b],
            SUITE_EPS,
        )
    })?;
    push(results, "matmul", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let h = 3 + rng.next_index(4);
        let w = 3 + rng.next_index(4);
        let cin = 1 + rng.next_index(3);
        let cout = 1 + rng.next_index(3);
        let dilation = 1 + rng.next_index(2);
        let x = random_array(&mut rng, vec![h, w, cin]);
        let kern = random_array(&mut rng, vec![3, 3, cin, cout]);
        grad_check_multi(
            |rec, xs| ops::sum(rec, &ops::conv2d(rec, &xs[0], &xs[1], 1, dilation, false)?),
            &[x, kern],
            SUITE_EPS,
        )
    })?;
    push(results, "conv2d", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let c = 1 + rng.next_index(4);
        let x = random_array(&mut rng, vec![6, 5, c]);
        let kern = random_array(&mut rng, vec![3, 3, c]);
        let dilation = 1 + rng.next_index(2);
        grad_check_multi(
            |rec, xs| ops::sum(rec, &ops::conv2d(rec, &xs[0], &xs[1], 1, dilation, true)?),
            &[x, kern],
            SUITE_EPS,
        )
    })?;
    push(results, "conv2d_depthwise", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let n = 3 + rng.next_index(5);
        let x = random_array(&mut rng, vec![n]);
        grad_check_multi(
            |rec, xs| ops::sum(rec, &ops::sigmoid(rec, &xs[0])?),
            &[x],
            SUITE_EPS,
        )
    })?;
    push(results, "sigmoid", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let x = random_array_off_kinks(&mut rng, vec![4, 3]);
        grad_check_multi(|rec, xs| ops::sum(rec, &ops::relu(rec, &xs[0])?), &[x], SUITE_EPS)
    })?;
    push(results, "relu", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let n: usize = 5;
        let data: Vec<f64> = (0..n).map(|_| 0.2 + rng.next_f64() * 3.0).collect();
        let x = DiffArray::vector(data);
        grad_check_multi(|rec, xs| ops::sum(rec, &ops::ln(rec, &xs[0])?), &[x], SUITE_EPS)
    })?;
    push(results, "ln", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let a = random_array(&mut rng, vec![3, 4]);
        let b = random_array(&mut rng, vec![3, 4]);
        grad_check_multi(
            |rec, xs| {
                let sum = ops::add(rec, &xs[0], &xs[1])?;
                let diff = ops::sub(rec, &xs[0], &xs[1])?;
                ops::sum(rec, &ops::mul(rec, &sum, &diff)?)
            },
            &[a, b],
            SUITE_EPS,
        )
    })?;
    push(results, "add_sub_mul", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let x = random_array(&mut rng, vec![4, 3]);
        let b = random_array(&mut rng, vec![3]);
        grad_check_multi(
            |rec, xs| {
                let y = ops::add_row_vector(rec, &xs[0], &xs[1])?;
                ops::sum(rec, &ops::affine(rec, &y, 1.7, -0.3)?)
            },
            &[x, b],
            SUITE_EPS,
        )
    })?;
    push(results, "affine_add_row_vector", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let x = random_array(&mut rng, vec![3, 2, 4]);
        let s = random_array(&mut rng, vec![4]);
        let b = random_array(&mut rng, vec![4]);
        grad_check_multi(
            |rec, xs| {
                let y = ops::mul_channels(rec, &xs[0], &xs[1])?;
                ops::sum(rec, &ops::add_channels(rec, &y, &xs[2])?)
            },
            &[x, s, b],
            SUITE_EPS,
        )
    })?;
    push(results, "channel_scale_shift", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let a = random_array(&mut rng, vec![3, 2]);
        let b = random_array(&mut rng, vec![3, 3]);
        grad_check_multi(
            |rec, xs| {
                let cat = ops::concat_last(rec, &xs[0], &xs[1])?;
                let piece = ops::slice_last(rec, &cat, 1, 4)?;
                ops::sum(rec, &ops::mul(rec, &piece, &piece)?)
            },
            &[a, b],
            SUITE_EPS,
        )
    })?;
    push(results, "concat_slice", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let x = random_array(&mut rng, vec![3, 5]);
        grad_check_multi(
            |rec, xs| {
                let t = ops::transpose2d(rec, &xs[0])?;
                ops::sum(rec, &ops::matmul(rec, &xs[0], &t)?)
            },
            &[x],
            SUITE_EPS,
        )
    })?;
    push(results, "transpose", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let x = random_array(&mut rng, vec![3, 4]);
        let weights = random_array(&mut rng, vec![3, 4]);
        grad_check_multi(
            |rec, xs| {
                let soft = ops::softmax_rows(rec, &xs[0])?;
                ops::sum(rec, &ops::mul(rec, &soft, &xs[1])?)
            },
            &[x, weights],
            SUITE_EPS,
        )
    })?;
    push(results, "softmax_rows", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let x = random_array(&mut rng, vec![3, 4]);
        let weights = random_array(&mut rng, vec![3, 4]);
        let mask = [true, false, true, true];
        grad_check_multi(
            |rec, xs| {
                let soft = ops::softmax_rows_masked(rec, &xs[0], &mask)?;
                ops::sum(rec, &ops::mul(rec, &soft, &xs[1])?)
            },
            &[x, weights],
            SUITE_EPS,
        )
    })?;
    push(results, "softmax_rows_masked", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let x = random_array(&mut rng, vec![3, 6]);
        let weights = random_array(&mut rng, vec![3, 6]);
        grad_check_multi(
            |rec, xs| {
                let normed = ops::layer_norm_rows(rec, &xs[0], 1e-5)?;
                ops::sum(rec, &ops::mul(rec, &normed, &xs[1])?)
            },
            &[x, weights],
            SUITE_EPS,
        )
    })?;
    push(results, "layer_norm_rows", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        // distinct entries keep the argmax stable under the probe
        let x = random_array(&mut rng, vec![4, 3, 2]);
        grad_check_multi(
            |rec, xs| ops::sum(rec, &ops::global_max_pool(rec, &xs[0])?),
            &[x],
            SUITE_EPS,
        )
    })?;
    push(results, "global_max_pool", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let x = random_array(&mut rng, vec![4, 3, 2]);
        grad_check_multi(
            |rec, xs| {
                let pooled = ops::global_avg_pool(rec, &xs[0])?;
                ops::sum(rec, &ops::mul(rec, &pooled, &pooled)?)
            },
            &[x],
            SUITE_EPS,
        )
    })?;
    push(results, "global_avg_pool", err);

    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let x = random_array(&mut rng, vec![2, 3]);
        grad_check_multi(|rec, xs| ops::mean(rec, &xs[0]), &[x], SUITE_EPS)
    })?;
    push(results, "mean", err);

    Ok(())
}

/// Flattened (input + parameter) gradient check of a module forward.
fn module_check<F>(params: &Params, inputs: &[DiffArray], f: F) -> Result<f64, TensorError>
where
    F: Fn(&GradRecord, &crate::tensor::LeafParams, &[DiffArray]) -> Result<DiffArray, TensorError>,
{
    module_check_eps(params, inputs, SUITE_EPS, f)
}

fn module_check_eps<F>(
    params: &Params,
    inputs: &[DiffArray],
    eps: f64,
    f: F,
) -> Result<f64, TensorError>
where
    F: Fn(&GradRecord, &crate::tensor::LeafParams, &[DiffArray]) -> Result<DiffArray, TensorError>,
{
    // order: module inputs first, then parameters in name order
    let names: Vec<String> = params.names().cloned().collect();
    let mut all: Vec<DiffArray> = inputs.to_vec();
    for name in &names {
        all.push(params.get(name).unwrap().clone());
    }
    let n_inputs = inputs.len();
    grad_check_multi(
        |rec, xs| {
            // the probe arrays are already leaves of this record
            let leaves = crate::tensor::LeafParams::from_map(
                names.iter().cloned().zip(xs[n_inputs..].iter().cloned()).collect(),
            );
            f(rec, &leaves, &xs[..n_inputs])
        },
        &all,
        eps,
    )
}

fn module_checks(results: &mut Vec<GradCheckResult>) -> Result<(), TensorError> {
    let window = Window::new(-2.0, 2.0, -1.0, 1.0).unwrap();
    let grid = GridSpec::with_default_cell(window);

    // raster encoder: two blocks at 8x8 scale
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let enc = RasterEncoder::new("enc", 4, 2);
        let mut params = Params::new();
        enc.init(&mut params, &mut rng);
        let tile: Vec<f64> = (0..8 * 8 * 3).map(|_| if rng.next_f64() < 0.3 { 1.0 } else { 0.0 }).collect();
        let input = DiffArray::new(vec![8, 8, 3], tile)?;
        module_check(&params, &[input], |rec, leaves, xs| {
            ops::sum(rec, &enc.forward(rec, leaves, &xs[0])?)
        })
    })?;
    results.push(GradCheckResult { name: "raster_encoder", max_rel_err: err });

    // observation encoder
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let enc = ObsEncoder::new("obs", 4);
        let mut params = Params::new();
        enc.init(&mut params, &mut rng);
        let input = random_array(&mut rng, vec![6, 5, 2]);
        module_check(&params, &[input], |rec, leaves, xs| {
            ops::sum(rec, &enc.forward(rec, leaves, &xs[0])?)
        })
    })?;
    results.push(GradCheckResult { name: "obs_encoder", max_rel_err: err });

    // feature transform + modulation, end to end at 6x4x8
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let ft = FeatureTransform::new("ft", 8);
        let mut params = Params::new();
        ft.init(&mut params, &mut rng);
        // nudge the zero-initialized head so the check exercises real
        // modulation rather than the identity
        for name in ["ft.mlp.w2", "ft.mlp.b2"] {
            let value = params.get_mut(name).unwrap();
            for v in value.data_mut().iter_mut() {
                *v = 0.1 * rng.next_gaussian();
            }
        }
        let f_sd_r = random_array(&mut rng, vec![6, 4, 8]);
        let f_cond = random_array(&mut rng, vec![6, 4, 8]);
        module_check(&params, &[f_sd_r, f_cond], |rec, leaves, xs| {
            let film = ft.forward(rec, leaves, &xs[0], &xs[1])?;
            ops::sum(rec, &film_modulate(rec, &xs[0], &film)?)
        })
    })?;
    results.push(GradCheckResult { name: "feature_transform_film", max_rel_err: err });

    // vector encoder at M=4, P=3, C=8
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let enc = VectorEncoder::new("venc", 3, 8, 2, 2);
        let mut params = Params::new();
        enc.init(&mut params, &mut rng);
        let tokens = suite_tokens(&window);
        let squares = random_array(&mut rng, vec![4, 8]);
        module_check(&params, &[squares], |rec, leaves, xs| {
            let feats = enc.forward(rec, leaves, &tokens)?;
            ops::sum(rec, &ops::mul(rec, &feats, &xs[0])?)
        })
    })?;
    results.push(GradCheckResult { name: "vector_encoder", max_rel_err: err });

    // BEV cross-attention on a 4x4 grid; inputs are scaled down so the
    // softmax stays un-saturated and the inert residual is subtracted to
    // keep the summed value small relative to the checked gradients
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let attn = BevCrossAttention::new("xattn", 8, 2);
        let mut params = Params::new();
        attn.init(&mut params, &mut rng);
        let tokens = suite_tokens(&window);
        let mut f_b = random_array(&mut rng, vec![4, 4, 8]);
        for v in f_b.data_mut() {
            *v *= 0.4;
        }
        let mut feats = random_array(&mut rng, vec![4, 8]);
        for v in feats.data_mut() {
            *v *= 0.4;
        }
        module_check_eps(&params, &[f_b, feats], SUITE_EPS_MODULES, |rec, leaves, xs| {
            let out = attn.forward(rec, leaves, &xs[0], &xs[1], &tokens, &grid)?;
            let centered = ops::sub(rec, &out.reshaped(vec![16, 8])?, &xs[0].clone().reshaped(vec![16, 8])?)?;
            ops::sum(rec, &centered)
        })
    })?;
    results.push(GradCheckResult { name: "bev_cross_attention", max_rel_err: err });

    // DGFF at 4x4x8
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let dgff = Dgff::new("dgff", 8);
        let mut params = Params::new();
        dgff.init(&mut params, &mut rng);
        let f_r = random_array(&mut rng, vec![4, 4, 8]);
        let f_v = random_array(&mut rng, vec![4, 4, 8]);
        module_check(&params, &[f_r, f_v], |rec, leaves, xs| {
            ops::sum(rec, &dgff.fuse(rec, leaves, &xs[0], &xs[1], FusionWeights::balanced())?)
        })
    })?;
    results.push(GradCheckResult { name: "dgff", max_rel_err: err });

    // IKPD head at 8x8x8
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let head = IkpdHead::new("ikpd", 8);
        let mut params = Params::new();
        head.init(&mut params, &mut rng);
        let input = random_array(&mut rng, vec![8, 8, 8]);
        let weights = random_array(&mut rng, vec![8, 8, 1]);
        module_check(&params, &[input, weights], |rec, leaves, xs| {
            let hm = head.forward(rec, leaves, &xs[0])?;
            ops::sum(rec, &ops::mul(rec, &hm, &xs[1])?)
        })
    })?;
    results.push(GradCheckResult { name: "ikpd_head", max_rel_err: err });

    // focal loss against a rendered target
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let small = GridSpec::with_default_cell(window);
        let kp = Keypoint { position: small.cell_center(3, 3), kind: KeypointKind::Junction };
        let target = render_heatmap(&[kp], &small, 1.5);
        let n = target.h * target.w;
        let pred_data: Vec<f64> = (0..n).map(|_| 0.1 + 0.8 * rng.next_f64()).collect();
        let pred = DiffArray::new(vec![target.h, target.w, 1], pred_data)?;
        let target_clone = Heatmap { h: target.h, w: target.w, data: target.data.clone() };
        grad_check_multi(
            |rec, xs| focal_loss(rec, &xs[0], &target_clone),
            &[pred],
            SUITE_EPS,
        )
    })?;
    results.push(GradCheckResult { name: "focal_loss", max_rel_err: err });

    // segmentation cross-entropy
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let n = 24;
        let pred_data: Vec<f64> = (0..n).map(|_| 0.1 + 0.8 * rng.next_f64()).collect();
        let target: Vec<f64> = (0..n).map(|_| if rng.next_f64() < 0.3 { 1.0 } else { 0.0 }).collect();
        let pred = DiffArray::new(vec![4, 6, 1], pred_data)?;
        grad_check_multi(|rec, xs| bce_loss(rec, &xs[0], &target), &[pred], SUITE_EPS)
    })?;
    results.push(GradCheckResult { name: "bce_loss", max_rel_err: err });

    Ok(())
}

fn suite_tokens(window: &Window) -> SegmentTokens {
    let map = LocalMap {
        polylines: vec![
            Polyline::new(
                Category::Road,
                vec![Point::new(-1.5, 0.2), Point::new(1.5, 0.2)],
            )
            .expect("valid"),
            Polyline::new(
                Category::Sidewalk,
                vec![Point::new(-1.0, -0.6), Point::new(1.0, -0.6)],
            )
            .expect("valid"),
        ],
        window: *window,
    };
    tokenize(&map, 4, 3, 25.0)
}

/// End-to-end check of the composed hybrid model with both losses.
fn composed_model_check(results: &mut Vec<GradCheckResult>) -> Result<(), TensorError> {
    // 2 m x 2 m window -> a 4x4 grid matching the handcrafted inputs
    let window = Window::new(-1.0, 1.0, -1.0, 1.0).unwrap();
    let grid = GridSpec::with_default_cell(window);
    let err = max_over_seeds(|seed| {
        let mut rng = SplitMix64::new(seed);
        let config = RunConfig {
            variant: Variant::HybridIkpd,
            channels: 4,
            seed,
            ..RunConfig::default()
        };
        let vector_cfg = VectorConfig { m: 4, p: 3, blocks: 1, heads: 2, l_max: 25.0 };
        let model = Model::build_with_vector_cfg(&config, vector_cfg).map_err(|e| match e {
            crate::model::ModelError::Tensor(t) => t,
            other => TensorError::InvalidArgument { op: "composed_model", what: other.to_string() },
        })?;
        let tokens = suite_tokens(&window);
        let obs = random_array(&mut rng, vec![4, 4, 2]);
        let raster_data: Vec<f64> =
            (0..4 * 4 * 3).map(|_| if rng.next_f64() < 0.3 { 1.0 } else { 0.0 }).collect();
        let raster = DiffArray::new(vec![4, 4, 3], raster_data)?;
        let occupancy_target: Vec<f64> =
            (0..16).map(|_| if rng.next_f64() < 0.3 { 1.0 } else { 0.0 }).collect();
        let kp = Keypoint { position: grid.cell_center(1, 2), kind: KeypointKind::Crossing };
        let heatmap_target = render_heatmap(&[kp], &grid, 1.5);

        // the loss is scaled down so finite-difference noise stays under
        // the fixed 1e-8 denominator floor on near-zero-gradient
        // coordinates (paths through the zero-initialized alignment head)
        module_check_eps(&model.params, &[obs, raster], 3e-5, |rec, leaves, xs| {
            let inputs = SceneInputs {
                obs: xs[0].clone(),
                raster: xs[1].clone(),
                tokens: tokens.clone(),
                grid,
            };
            let out = model.forward(rec, leaves, &inputs)?;
            let l_seg = bce_loss(rec, &out.occupancy, &occupancy_target)?;
            let l_ikpd = focal_loss(rec, &out.heatmap.expect("ikpd head"), &heatmap_target)?;
            ops::scale(rec, &ops::add(rec, &l_seg, &l_ikpd)?, 0.01)
        })
    })?;
    results.push(GradCheckResult { name: "composed_model", max_rel_err: err });
    Ok(())
}

/// Run every check; results carry the worst relative error per module.
pub fn run_full_suite() -> Result<Vec<GradCheckResult>, TensorError> {
    let mut results = Vec::new();
    kernel_checks(&mut results)?;
    module_checks(&mut results)?;
    composed_model_check(&mut results)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_gradient_suite_passes() {
        let results = run_full_suite().unwrap();
        assert!(results.len() >= 20);
        for r in &results {
            assert!(r.passed(), "{} failed with max rel err {}", r.name, r.max_rel_err);
        }
    }
}


