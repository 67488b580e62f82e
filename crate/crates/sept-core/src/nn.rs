//! Shared building blocks for the learned components: parameter
//! initialization, linear/conv compositions, and sinusoidal coordinate
//! embeddings.

use crate::geom::{Point, Window};
use crate::rng::SplitMix64;
use crate::tensor::{ops, DiffArray, GradRecord, LeafParams, Params, TensorError};

/// He-style normal init for a weight tensor with the given fan-in.
pub fn init_weight(
    params: &mut Params,
    name: impl Into<String>,
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut SplitMix64,
) {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * rng.next_gaussian()).collect();
    params.insert(name, DiffArray::new(shape, data).expect("shape matches data"));
}

pub fn init_zeros(params: &mut Params, name: impl Into<String>, shape: Vec<usize>) {
    params.insert(name, DiffArray::zeros(shape));
}

pub fn init_const(params: &mut Params, name: impl Into<String>, shape: Vec<usize>, value: f64) {
    params.insert(name, DiffArray::full(shape, value));
}

/// x[n, in] * w[in, out] + b[out].
pub fn linear(
    rec: &GradRecord,
    x: &DiffArray,
    w: &DiffArray,
    b: Option<&DiffArray>,
) -> Result<DiffArray, TensorError> {
    let y = ops::matmul(rec, x, w)?;
    match b {
        Some(bias) => ops::add_row_vector(rec, &y, bias),
        None => Ok(y),
    }
}

/// 1x1 convolution expressed as a channel-wise linear map over [H, W, C].
pub fn pointwise(
    rec: &GradRecord,
    x: &DiffArray,
    w: &DiffArray,
    b: Option<&DiffArray>,
) -> Result<DiffArray, TensorError> {
    let (h, wd, c) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(TensorError::BadRank { op: "pointwise", expected: 3, shape: other.to_vec() })
        }
    };
    let flat = x.clone().reshaped(vec![h * wd, c])?;
    let out_c = w.shape()[1];
    linear(rec, &flat, w, b)?.reshaped(vec![h, wd, out_c])
}

/// A stack of spatial conv blocks: 3x3 conv, channel bias, rectifier.
/// Block `i` runs at dilation `i + 1`, which widens the receptive field to
/// cover the lane offset from the road skeleton and spans an intersection
/// at 0.5 m cells. Parameter names follow `{prefix}.block{i}.{weight,bias}`.
pub struct ConvStack {
    pub prefix: String,
    pub cin: usize,
    pub channels: usize,
    pub blocks: usize,
}

impl ConvStack {
    pub fn new(prefix: impl Into<String>, cin: usize, channels: usize, blocks: usize) -> Self {
        ConvStack { prefix: prefix.into(), cin, channels, blocks }
    }

    pub fn init(&self, params: &mut Params, rng: &mut SplitMix64) {
        for i in 0..self.blocks {
            let cin = if i == 0 { self.cin } else { self.channels };
            init_weight(
                params,
                format!("{}.block{i}.weight", self.prefix),
                vec![3, 3, cin, self.channels],
                9 * cin,
                rng,
            );
            init_zeros(params, format!("{}.block{i}.bias", self.prefix), vec![self.channels]);
        }
    }

    pub fn forward(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        input: &DiffArray,
    ) -> Result<DiffArray, TensorError> {
        let mut x = input.clone();
        for i in 0..self.blocks {
            let w = leaves.get(&format!("{}.block{i}.weight", self.prefix))?;
            let b = leaves.get(&format!("{}.block{i}.bias", self.prefix))?;
            x = ops::conv2d(rec, &x, w, 1, i + 1, false)?;
            x = ops::add_channels(rec, &x, b)?;
            x = ops::relu(rec, &x)?;
        }
        Ok(x)
    }
}

/// Sinusoidal embedding of a 2-D position into `c` features (`c` divisible
/// by 4): sin/cos pairs per axis over wavelengths spaced geometrically from
/// 2 m up to twice the window extent.
pub fn sincos_embed(p: &Point, c: usize, window: &Window) -> Vec<f64> {
    assert!(c % 4 == 0, "embedding width must be divisible by 4");
    let bands = c / 4;
    let lambda_min = 2.0f64;
    let lambda_max = 2.0 * window.width_x().max(window.width_y());
    let mut out = Vec::with_capacity(c);
    for axis in 0..2 {
        let v = if axis == 0 { p.x - window.x_min } else { p.y - window.y_min };
        for i in 0..bands {
            let t = if bands > 1 { i as f64 / (bands - 1) as f64 } else { 0.0 };
            let lambda = lambda_min * (lambda_max / lambda_min).powf(t);
            let phase = 2.0 * std::f64::consts::PI * v / lambda;
            out.push(phase.sin());
            out.push(phase.cos());
        }
    }
    out
}
