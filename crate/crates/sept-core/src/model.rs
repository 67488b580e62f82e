//! Run configuration and model composition.
//!
//! A model variant decides which SD-map branches are wired in front of the
//! occupancy head: the baseline sees only the observation encoder, single
//! branches add the rasterized or vectorized prior, and the hybrid variants
//! fuse both (optionally with the auxiliary keypoint head). The fusion
//! strategies besides the gated fusion exist as harness baselines assembled
//! from the same kernels.

use crate::dgff::{Dgff, FusionWeights};
use crate::geom::GridSpec;
use crate::nn::{init_const, init_weight, init_zeros, pointwise, sincos_embed};
use crate::raster::{film_modulate, FeatureTransform, RasterEncoder};
use crate::rng::{mix, SplitMix64};
use crate::synth::ObsEncoder;
use crate::tensor::{ops, DiffArray, GradRecord, LeafParams, Params, TensorError};
use crate::vector::{multi_head_attention, BevCrossAttention, SegmentTokens, VectorEncoder};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("fusion {fusion:?} is only meaningful for hybrid variants, got variant {variant:?}")]
    InvalidCombination { variant: Variant, fusion: FusionKind },
    #[error("channels must be a positive multiple of 4, got {0}")]
    BadChannels(usize),
    #[error("{field} must be {requirement}")]
    BadField { field: &'static str, requirement: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint does not fit the configured model: {0}")]
    CheckpointMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    RasterOnly,
    VectorOnly,
    Hybrid,
    HybridIkpd,
}

impl Variant {
    pub fn uses_raster(&self) -> bool {
        matches!(self, Variant::RasterOnly | Variant::Hybrid | Variant::HybridIkpd)
    }

    pub fn uses_vector(&self) -> bool {
        matches!(self, Variant::VectorOnly | Variant::Hybrid | Variant::HybridIkpd)
    }

    pub fn is_hybrid(&self) -> bool {
        matches!(self, Variant::Hybrid | Variant::HybridIkpd)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::RasterOnly => "raster_only",
            Variant::VectorOnly => "vector_only",
            Variant::Hybrid => "hybrid",
            Variant::HybridIkpd => "hybrid_ikpd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Dgff,
    Add,
    ConcatFfn,
    CrossAttn,
}

fn default_fusion() -> FusionKind {
    FusionKind::Dgff
}
fn default_half() -> f64 {
    0.5
}
fn default_sigma() -> f64 {
    2.0
}
fn default_lr() -> f64 {
    0.04
}
fn default_steps() -> usize {
    3600
}
fn default_channels() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_noise() -> f64 {
    0.02
}
fn default_clip() -> f64 {
    2.0
}
fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}
fn default_variant() -> Variant {
    Variant::HybridIkpd
}

/// One training/evaluation run, as read from the JSON config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_fusion")]
    pub fusion: FusionKind,
    #[serde(default = "default_half")]
    pub mu: f64,
    #[serde(default = "default_half")]
    pub nu: f64,
    /// Ground-truth heatmap radius in cells.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// SD-map perturbation applied when scenes are loaded.
    #[serde(default)]
    pub sigma_t: f64,
    #[serde(default)]
    pub sigma_theta: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Feature-transform alignment in the raster branch.
    #[serde(default = "default_true")]
    pub ft_enabled: bool,
    #[serde(default = "default_noise")]
    pub noise_p: f64,
    /// Global gradient-norm ceiling per SGD step; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let config: RunConfig = serde_json::from_str(text)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(ModelError::BadChannels(self.channels));
        }
        if !self.variant.is_hybrid() && self.fusion != FusionKind::Dgff {
            return Err(ModelError::InvalidCombination { variant: self.variant, fusion: self.fusion });
        }
        if self.mu < 0.0 || self.nu < 0.0 {
            return Err(ModelError::BadField { field: "mu/nu", requirement: "non-negative" });
        }
        if self.sigma <= 0.0 {
            return Err(ModelError::BadField { field: "sigma", requirement: "positive" });
        }
        if self.learning_rate < 0.0 {
            return Err(ModelError::BadField { field: "learning_rate", requirement: "non-negative" });
        }
        if !(0.0..=1.0).contains(&self.noise_p) {
            return Err(ModelError::BadField { field: "noise_p", requirement: "in [0, 1]" });
        }
        if self.sigma_t < 0.0 || self.sigma_theta < 0.0 {
            return Err(ModelError::BadField { field: "sigma_t/sigma_theta", requirement: "non-negative" });
        }
        if self.clip_norm < 0.0 {
            return Err(ModelError::BadField { field: "clip_norm", requirement: "non-negative" });
        }
        Ok(())
    }

    /// FNV hash of the canonical JSON serialization.
    pub fn hash(&self) -> u64 {
        crate::rng::fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Vectorized-branch hyperparameters (fixed across runs).
#[derive(Clone, Copy, Debug)]
pub struct VectorConfig {
    pub m: usize,
    pub p: usize,
    pub blocks: usize,
    pub heads: usize,
    pub l_max: f64,
}

impl Default for VectorConfig {
    fn default() -> Self {
        VectorConfig { m: 32, p: 11, blocks: 2, heads: 4, l_max: 25.0 }
    }
}

/// Inputs for one scene forward pass.
pub struct SceneInputs {
    pub obs: DiffArray,
    pub raster: DiffArray,
    pub tokens: SegmentTokens,
    pub grid: GridSpec,
}

pub struct ModelOutput {
    /// Occupancy probability, [H, W, 1].
    pub occupancy: DiffArray,
    /// Keypoint heatmap prediction, present for the IKPD variant.
    pub heatmap: Option<DiffArray>,
}

/// Composed forward function plus its parameter store.
pub struct Model {
    pub variant: Variant,
    pub fusion: FusionKind,
    pub channels: usize,
    pub ft_enabled: bool,
    pub weights: FusionWeights,
    pub vector_cfg: VectorConfig,
    pub params: Params,
    obs_encoder: ObsEncoder,
    raster_encoder: RasterEncoder,
    feature_transform: FeatureTransform,
    vector_encoder: VectorEncoder,
    cross_attention: BevCrossAttention,
    dgff: Dgff,
    ikpd_head: crate::ikpd::IkpdHead,
}

impl Model {
    pub fn build(config: &RunConfig) -> Result<Model, ModelError> {
        Self::build_with_vector_cfg(config, VectorConfig::default())
    }

    pub fn build_with_vector_cfg(
        config: &RunConfig,
        vector_cfg: VectorConfig,
    ) -> Result<Model, ModelError> {
        config.validate()?;
        if config.channels % vector_cfg.heads != 0 {
            return Err(ModelError::BadChannels(config.channels));
        }
        let c = config.channels;
        let model = Model {
            variant: config.variant,
            fusion: config.fusion,
            channels: c,
            ft_enabled: config.ft_enabled,
            weights: FusionWeights::new(config.mu, config.nu)
                .expect("validated non-negative"),
            vector_cfg,
            params: Params::new(),
            obs_encoder: ObsEncoder::new("obs_enc", c),
            raster_encoder: RasterEncoder::new("raster_enc", c, 3),
            feature_transform: FeatureTransform::new("ft", c),
            vector_encoder: VectorEncoder::new(
                "vec_enc",
                vector_cfg.p,
                c,
                vector_cfg.blocks,
                vector_cfg.heads,
            ),
            cross_attention: BevCrossAttention::new("bev_xattn", c, vector_cfg.heads),
            dgff: Dgff::new("dgff", c),
            ikpd_head: crate::ikpd::IkpdHead::new("ikpd", c),
        };
        let mut model = model;
        let mut rng = SplitMix64::new(mix(config.seed, 0x1417));
        model.obs_encoder.init(&mut model.params, &mut rng);
        if config.variant.uses_raster() {
            model.raster_encoder.init(&mut model.params, &mut rng);
            if config.ft_enabled {
                model.feature_transform.init(&mut model.params, &mut rng);
            }
        }
        if config.variant.uses_vector() {
            model.vector_encoder.init(&mut model.params, &mut rng);
            model.cross_attention.init(&mut model.params, &mut rng);
        }
        if config.variant.is_hybrid() {
            match config.fusion {
                FusionKind::Dgff => model.dgff.init(&mut model.params, &mut rng),
                FusionKind::Add => {}
                FusionKind::ConcatFfn => model.dgff.init_ffn(&mut model.params, &mut rng),
                FusionKind::CrossAttn => {
                    for name in ["wq", "wk", "wv", "wo"] {
                        init_weight(&mut model.params, format!("fuse_attn.{name}"), vec![c, c], c, &mut rng);
                    }
                }
            }
        }
        // zero-initialized head: the first logits equal the bias exactly,
        // which keeps plain SGD away from saturated sigmoids early on
        init_zeros(&mut model.params, "occ.weight", vec![c, 1]);
        init_const(&mut model.params, "occ.bias", vec![1], -2.19);
        if config.variant == Variant::HybridIkpd {
            model.ikpd_head.init(&mut model.params, &mut rng);
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Swap in a loaded parameter store, verifying names and shapes.
    pub fn load_params(&mut self, loaded: Params) -> Result<(), ModelError> {
        if loaded.len() != self.params.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                loaded.len()
            )));
        }
        for (name, value) in self.params.iter() {
            match loaded.get(name) {
                None => {
                    return Err(ModelError::CheckpointMismatch(format!("missing parameter {name}")))
                }
                Some(found) if found.shape() != value.shape() => {
                    return Err(ModelError::CheckpointMismatch(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        found.shape(),
                        value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        self.params = loaded;
        Ok(())
    }

    /// Cross-attention fusion baseline: the vector feature queries a coarse
    /// pooled tokenization of the raster feature.
    fn fuse_cross_attn(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        f_r: &DiffArray,
        f_v: &DiffArray,
        grid: &GridSpec,
    ) -> Result<DiffArray, TensorError> {
        let (h, w, c) = match f_r.shape() {
            [h, w, c] => (*h, *w, *c),
            other => {
                return Err(TensorError::BadRank { op: "fuse_cross_attn", expected: 3, shape: other.to_vec() })
            }
        };
        // pool the raster feature into an 8x4 token grid with a constant
        // averaging matrix
        let (th, tw) = (8.min(h), 4.min(w));
        let tokens_n = th * tw;
        let mut pool = vec![0.0; tokens_n * h * w];
        for r in 0..h {
            for col in 0..w {
                let tr = r * th / h;
                let tc = col * tw / w;
                pool[(tr * tw + tc) * h * w + r * w + col] = 1.0;
            }
        }
        // normalize rows to means
        for t in 0..tokens_n {
            let row = &mut pool[t * h * w..(t + 1) * h * w];
            let total: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= total.max(1.0);
            }
        }
        let pool = DiffArray::new(vec![tokens_n, h * w], pool)?;
        let f_r_flat = f_r.clone().reshaped(vec![h * w, c])?;
        let f_v_flat = f_v.clone().reshaped(vec![h * w, c])?;
        let pooled = ops::matmul(rec, &pool, &f_r_flat)?;

        let mut key_pe = vec![0.0; tokens_n * c];
        for tr in 0..th {
            for tc in 0..tw {
                // block center in meters
                let center = crate::geom::Point::new(
                    grid.window.x_min + (tr as f64 + 0.5) / th as f64 * grid.window.width_x(),
                    grid.window.y_min + (tc as f64 + 0.5) / tw as f64 * grid.window.width_y(),
                );
                key_pe[(tr * tw + tc) * c..(tr * tw + tc + 1) * c]
                    .copy_from_slice(&sincos_embed(&center, c, &grid.window));
            }
        }
        let k_in = ops::add(rec, &pooled, &DiffArray::new(vec![tokens_n, c], key_pe)?)?;
        let wq = leaves.get("fuse_attn.wq")?;
        let wk = leaves.get("fuse_attn.wk")?;
        let wv = leaves.get("fuse_attn.wv")?;
        let wo = leaves.get("fuse_attn.wo")?;
        let q = ops::matmul(rec, &f_v_flat, wq)?;
        let k = ops::matmul(rec, &k_in, wk)?;
        let v = ops::matmul(rec, &pooled, wv)?;
        let mask = vec![true; tokens_n];
        let attended = multi_head_attention(rec, &q, &k, &v, &mask, self.vector_cfg.heads)?;
        let projected = ops::matmul(rec, &attended, wo)?;
        ops::add(rec, &f_v_flat, &projected)?.reshaped(vec![h, w, c])
    }

    pub fn forward(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        inputs: &SceneInputs,
    ) -> Result<ModelOutput, TensorError> {
        let f_b = self.obs_encoder.forward(rec, leaves, &inputs.obs)?;

        let f_b_v = if self.variant.uses_vector() {
            let token_feats = self.vector_encoder.forward(rec, leaves, &inputs.tokens)?;
            Some(self.cross_attention.forward(
                rec,
                leaves,
                &f_b,
                &token_feats,
                &inputs.tokens,
                &inputs.grid,
            )?)
        } else {
            None
        };

        let f_b_r = if self.variant.uses_raster() {
            let f_sd_r = self.raster_encoder.forward(rec, leaves, &inputs.raster)?;
            if self.ft_enabled {
                // align against the vector-enhanced feature when present,
                // else against the plain BEV feature
                let cond = f_b_v.as_ref().unwrap_or(&f_b);
                let film = self.feature_transform.forward(rec, leaves, &f_sd_r, cond)?;
                Some(film_modulate(rec, &f_sd_r, &film)?)
            } else {
                Some(f_sd_r)
            }
        } else {
            None
        };

        let feature = match self.variant {
            Variant::Baseline => f_b,
            Variant::RasterOnly => ops::add(rec, &f_b, &f_b_r.expect("raster branch built"))?,
            Variant::VectorOnly => f_b_v.expect("vector branch built"),
            Variant::Hybrid | Variant::HybridIkpd => {
                let f_r = f_b_r.expect("raster branch built");
                let f_v = f_b_v.expect("vector branch built");
                match self.fusion {
                    FusionKind::Dgff => self.dgff.fuse(rec, leaves, &f_r, &f_v, self.weights)?,
                    FusionKind::Add => ops::add(rec, &f_r, &f_v)?,
                    FusionKind::ConcatFfn => self.dgff.fuse_concat(rec, leaves, &f_r, &f_v)?,
                    FusionKind::CrossAttn => {
                        self.fuse_cross_attn(rec, leaves, &f_r, &f_v, &inputs.grid)?
                    }
                }
            }
        };

        let occ_w = leaves.get("occ.weight")?;
        let occ_b = leaves.get("occ.bias")?;
        let occupancy = ops::sigmoid(rec, &pointwise(rec, &feature, occ_w, Some(occ_b))?)?;

        let heatmap = if self.variant == Variant::HybridIkpd {
            Some(self.ikpd_head.forward(rec, leaves, &feature)?)
        } else {
            None
        };

        Ok(ModelOutput { occupancy, heatmap })
    }
}
