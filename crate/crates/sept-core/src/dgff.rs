//! Dual gated feature fusion of the raster- and vector-enhanced BEV features.
//!
//! The two features are concatenated along channels and pushed through a
//! feed-forward network; each raw input then gates the fused feature through
//! an element-wise sigmoid (no learned parameters in the gates), and two
//! parallel channel projections are blended with scalar weights mu/nu.

use crate::nn::{init_weight, init_zeros, pointwise};
use crate::rng::SplitMix64;
use crate::tensor::{ops, DiffArray, GradRecord, LeafParams, Params, TensorError};

/// Blend weights for the two gated projections; both must be non-negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub mu: f64,
    pub nu: f64,
}

impl FusionWeights {
    pub fn new(mu: f64, nu: f64) -> Option<Self> {
        if mu >= 0.0 && nu >= 0.0 {
            Some(FusionWeights { mu, nu })
        } else {
            None
        }
    }

    /// The published ablation optimum: equal halves.
    pub fn balanced() -> Self {
        FusionWeights { mu: 0.5, nu: 0.5 }
    }
}

pub struct Dgff {
    pub prefix: String,
    pub channels: usize,
}

impl Dgff {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Dgff { prefix: prefix.into(), channels }
    }

    pub fn init(&self, params: &mut Params, rng: &mut SplitMix64) {
        self.init_ffn(params, rng);
        let c = self.channels;
        init_weight(params, format!("{}.proj_r.weight", self.prefix), vec![c, c], c, rng);
        init_zeros(params, format!("{}.proj_r.bias", self.prefix), vec![c]);
        init_weight(params, format!("{}.proj_v.weight", self.prefix), vec![c, c], c, rng);
        init_zeros(params, format!("{}.proj_v.bias", self.prefix), vec![c]);
    }

    /// Initialize only the concat + feed-forward stage (used standalone as
    /// the concatenation-fusion harness baseline).
    pub fn init_ffn(&self, params: &mut Params, rng: &mut SplitMix64) {
        let c = self.channels;
        init_weight(params, format!("{}.ffn.w1", self.prefix), vec![2 * c, 2 * c], 2 * c, rng);
        init_zeros(params, format!("{}.ffn.b1", self.prefix), vec![2 * c]);
        init_weight(params, format!("{}.ffn.w2", self.prefix), vec![2 * c, c], 2 * c, rng);
        init_zeros(params, format!("{}.ffn.b2", self.prefix), vec![c]);
    }

    /// Concatenate along channels and apply the 2C -> 2C -> C feed-forward
    /// network with a rectifier between the layers.
    pub fn fuse_concat(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        f_r: &DiffArray,
        f_v: &DiffArray,
    ) -> Result<DiffArray, TensorError> {
        if f_r.shape() != f_v.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "fuse_concat",
                left: f_r.shape().to_vec(),
                right: f_v.shape().to_vec(),
            });
        }
        let cat = ops::concat_last(rec, f_r, f_v)?;
        let w1 = leaves.get(&format!("{}.ffn.w1", self.prefix))?;
        let b1 = leaves.get(&format!("{}.ffn.b1", self.prefix))?;
        let w2 = leaves.get(&format!("{}.ffn.w2", self.prefix))?;
        let b2 = leaves.get(&format!("{}.ffn.b2", self.prefix))?;
        let hidden = ops::relu(rec, &pointwise(rec, &cat, w1, Some(b1))?)?;
        pointwise(rec, &hidden, w2, Some(b2))
    }

    /// Parameter-free element-wise gates on the raw branch inputs.
    pub fn gates(
        rec: &GradRecord,
        f_r: &DiffArray,
        f_v: &DiffArray,
    ) -> Result<(DiffArray, DiffArray), TensorError> {
        if f_r.shape() != f_v.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "gates",
                left: f_r.shape().to_vec(),
                right: f_v.shape().to_vec(),
            });
        }
        Ok((ops::sigmoid(rec, f_r)?, ops::sigmoid(rec, f_v)?))
    }

    /// Full fusion: mu * Proj_R(w_R ⊙ F) + nu * Proj_V(w_V ⊙ F) with
    /// F = fuse_concat(f_r, f_v).
    pub fn fuse(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        f_r: &DiffArray,
        f_v: &DiffArray,
        weights: FusionWeights,
    ) -> Result<DiffArray, TensorError> {
        let fused = self.fuse_concat(rec, leaves, f_r, f_v)?;
        let (w_r, w_v) = Self::gates(rec, f_r, f_v)?;
        let pr_w = leaves.get(&format!("{}.proj_r.weight", self.prefix))?;
        let pr_b = leaves.get(&format!("{}.proj_r.bias", self.prefix))?;
        let pv_w = leaves.get(&format!("{}.proj_v.weight", self.prefix))?;
        let pv_b = leaves.get(&format!("{}.proj_v.bias", self.prefix))?;
        let gated_r = ops::mul(rec, &w_r, &fused)?;
        let gated_v = ops::mul(rec, &w_v, &fused)?;
        let term_r = ops::scale(rec, &pointwise(rec, &gated_r, pr_w, Some(pr_b))?, weights.mu)?;
        let term_v = ops::scale(rec, &pointwise(rec, &gated_v, pv_w, Some(pv_b))?, weights.nu)?;
        ops::add(rec, &term_r, &term_v)
    }
}
