//! Vectorized SD-map branch: arc-length tokenization of polylines, a masked
//! self-attention token encoder, and cross-attention that injects the tokens
//! into the BEV grid.

use crate::geom::{arc_length, GridSpec, Point};
use crate::nn::{init_weight, init_zeros, linear, sincos_embed};
use crate::rng::SplitMix64;
use crate::sdmap::{resample_polyline, LocalMap};
use crate::tensor::{ops, DiffArray, GradRecord, LeafParams, Params, TensorError};

/// Fixed-size token set for one map: `m` slots of `p` resampled points each,
/// with a one-hot category and a validity mask. Masked slots are all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentTokens {
    pub m: usize,
    pub p: usize,
    /// Row-major [m][p][2] meters.
    pub points: Vec<f64>,
    /// Row-major [m][3] one-hot.
    pub category: Vec<f64>,
    pub mask: Vec<bool>,
    /// Chunks that did not fit into the `m` slots.
    pub dropped: usize,
}

impl SegmentTokens {
    pub fn live_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Centroid of each live token's points; masked slots yield the origin.
    pub fn midpoints(&self) -> Vec<Point> {
        (0..self.m)
            .map(|t| {
                if !self.mask[t] {
                    return Point::new(0.0, 0.0);
                }
                let (mut sx, mut sy) = (0.0, 0.0);
                for i in 0..self.p {
                    sx += self.points[(t * self.p + i) * 2];
                    sy += self.points[(t * self.p + i) * 2 + 1];
                }
                Point::new(sx / self.p as f64, sy / self.p as f64)
            })
            .collect()
    }

    /// Token features for the encoder: flattened points then the one-hot
    /// category, shape [m, 2p + 3].
    pub fn feature_matrix(&self) -> DiffArray {
        let width = 2 * self.p + 3;
        let mut data = vec![0.0; self.m * width];
        for t in 0..self.m {
            let row = &mut data[t * width..(t + 1) * width];
            row[..2 * self.p].copy_from_slice(&self.points[t * self.p * 2..(t + 1) * self.p * 2]);
            row[2 * self.p..].copy_from_slice(&self.category[t * 3..(t + 1) * 3]);
        }
        DiffArray::new(vec![self.m, width], data).expect("consistent dimensions")
    }
}

/// Extract the sub-polyline between arc lengths [s0, s1]. Interior vertices
/// of the source polyline are kept.
fn sub_polyline(points: &[Point], s0: f64, s1: f64) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::new();
    let push = |p: Point, out: &mut Vec<Point>| {
        if out.last().map_or(true, |last| last.dist(&p) > 1e-9) {
            out.push(p);
        }
    };
    let mut walked = 0.0;
    for seg in points.windows(2) {
        let len = seg[0].dist(&seg[1]);
        if len <= 0.0 {
            continue;
        }
        let a = walked;
        let b = walked + len;
        walked = b;
        if b < s0 || a > s1 {
            continue;
        }
        let t0 = ((s0 - a) / len).clamp(0.0, 1.0);
        let t1 = ((s1 - a) / len).clamp(0.0, 1.0);
        push(seg[0].lerp(&seg[1], t0), &mut out);
        push(seg[0].lerp(&seg[1], t1), &mut out);
    }
    out
}

/// Split every polyline at arc-length multiples of `l_max`, resample each
/// chunk to `p` points, and pack the chunks into `m` token slots in input
/// order. Chunks beyond `m` are dropped and counted.
pub fn tokenize(map: &LocalMap, m: usize, p: usize, l_max: f64) -> SegmentTokens {
    assert!(m >= 1 && p >= 2, "need at least one slot and two points per token");
    assert!(l_max > 0.0, "l_max must be positive");
    let mut tokens = SegmentTokens {
        m,
        p,
        points: vec![0.0; m * p * 2],
        category: vec![0.0; m * 3],
        mask: vec![false; m],
        dropped: 0,
    };
    let mut slot = 0;
    for pl in &map.polylines {
        let total = arc_length(&pl.points);
        if total <= 1e-9 {
            continue;
        }
        let chunks = ((total / l_max) - 1e-9).ceil().max(1.0) as usize;
        for k in 0..chunks {
            let s0 = k as f64 * l_max;
            let s1 = ((k + 1) as f64 * l_max).min(total);
            let piece = sub_polyline(&pl.points, s0, s1);
            if piece.len() < 2 {
                continue;
            }
            let Ok(resampled) = resample_polyline(&piece, p) else { continue };
            if slot >= m {
                tokens.dropped += 1;
                continue;
            }
            for (i, q) in resampled.iter().enumerate() {
                tokens.points[(slot * p + i) * 2] = q.x;
                tokens.points[(slot * p + i) * 2 + 1] = q.y;
            }
            tokens.category[slot * 3 + pl.category.channel()] = 1.0;
            tokens.mask[slot] = true;
            slot += 1;
        }
    }
    tokens
}

/// Zero out rows whose mask is false (exact zeros, recorded as a product
/// with a constant 0/1 matrix).
pub fn mask_rows(
    rec: &GradRecord,
    x: &DiffArray,
    mask: &[bool],
) -> Result<DiffArray, TensorError> {
    let cols = *x.shape().last().expect("rank >= 1");
    let mut gate = vec![0.0; x.len()];
    for (r, &live) in mask.iter().enumerate() {
        if live {
            for j in 0..cols {
                gate[r * cols + j] = 1.0;
            }
        }
    }
    let gate = DiffArray::new(x.shape().to_vec(), gate)?;
    ops::mul(rec, x, &gate)
}

pub(crate) fn multi_head_attention(
    rec: &GradRecord,
    q: &DiffArray,
    k: &DiffArray,
    v: &DiffArray,
    key_mask: &[bool],
    heads: usize,
) -> Result<DiffArray, TensorError> {
    let c = *q.shape().last().expect("rank 2");
    debug_assert!(c % heads == 0);
    let d = c / heads;
    let scale_factor = 1.0 / (d as f64).sqrt();
    let mut merged: Option<DiffArray> = None;
    for h in 0..heads {
        let qh = ops::slice_last(rec, q, h * d, (h + 1) * d)?;
        let kh = ops::slice_last(rec, k, h * d, (h + 1) * d)?;
        let vh = ops::slice_last(rec, v, h * d, (h + 1) * d)?;
        let scores = ops::scale(rec, &ops::matmul(rec, &qh, &ops::transpose2d(rec, &kh)?)?, scale_factor)?;
        let attn = ops::softmax_rows_masked(rec, &scores, key_mask)?;
        let out = ops::matmul(rec, &attn, &vh)?;
        merged = Some(match merged {
            None => out,
            Some(prev) => ops::concat_last(rec, &prev, &out)?,
        });
    }
    Ok(merged.expect("at least one head"))
}

/// Self-attention encoder over the token set.
///
/// Per block: masked multi-head self-attention with a residual connection,
/// then row-wise feature normalization; padded rows are re-zeroed so masked
/// slots stay exactly zero throughout.
pub struct VectorEncoder {
    pub prefix: String,
    pub p: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl VectorEncoder {
    pub fn new(prefix: impl Into<String>, p: usize, channels: usize, blocks: usize, heads: usize) -> Self {
        VectorEncoder { prefix: prefix.into(), p, channels, blocks, heads }
    }

    pub fn init(&self, params: &mut Params, rng: &mut SplitMix64) {
        let c = self.channels;
        let input_width = 2 * self.p + 3;
        init_weight(params, format!("{}.embed.weight", self.prefix), vec![input_width, c], input_width, rng);
        init_zeros(params, format!("{}.embed.bias", self.prefix), vec![c]);
        for i in 0..self.blocks {
            for name in ["wq", "wk", "wv", "wo"] {
                init_weight(params, format!("{}.block{i}.{name}", self.prefix), vec![c, c], c, rng);
            }
        }
    }

    pub fn forward(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        tokens: &SegmentTokens,
    ) -> Result<DiffArray, TensorError> {
        let input = tokens.feature_matrix();
        let we = leaves.get(&format!("{}.embed.weight", self.prefix))?;
        let be = leaves.get(&format!("{}.embed.bias", self.prefix))?;
        let mut x = mask_rows(rec, &linear(rec, &input, we, Some(be))?, &tokens.mask)?;
        for i in 0..self.blocks {
            let wq = leaves.get(&format!("{}.block{i}.wq", self.prefix))?;
            let wk = leaves.get(&format!("{}.block{i}.wk", self.prefix))?;
            let wv = leaves.get(&format!("{}.block{i}.wv", self.prefix))?;
            let wo = leaves.get(&format!("{}.block{i}.wo", self.prefix))?;
            let q = ops::matmul(rec, &x, wq)?;
            let k = ops::matmul(rec, &x, wk)?;
            let v = ops::matmul(rec, &x, wv)?;
            let attended = multi_head_attention(rec, &q, &k, &v, &tokens.mask, self.heads)?;
            let projected = ops::matmul(rec, &attended, wo)?;
            let x_residual = ops::add(rec, &x, &projected)?;
            x = mask_rows(rec, &ops::layer_norm_rows(rec, &x_residual, 1e-5)?, &tokens.mask)?;
        }
        Ok(x)
    }
}

/// Cross-attention from BEV cells onto the encoded SD tokens.
///
/// Queries are BEV features plus a sinusoidal embedding of the cell center;
/// keys are token features plus a sinusoidal embedding of the segment
/// midpoint, so attention depends on geometry rather than slot index. The
/// output adds residually onto the BEV feature; with no live tokens the
/// input is returned unchanged.
pub struct BevCrossAttention {
    pub prefix: String,
    pub channels: usize,
    pub heads: usize,
}

impl BevCrossAttention {
    pub fn new(prefix: impl Into<String>, channels: usize, heads: usize) -> Self {
        BevCrossAttention { prefix: prefix.into(), channels, heads }
    }

    pub fn init(&self, params: &mut Params, rng: &mut SplitMix64) {
        let c = self.channels;
        for name in ["wq", "wk", "wv", "wo"] {
            init_weight(params, format!("{}.{name}", self.prefix), vec![c, c], c, rng);
        }
    }

    pub fn forward(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        f_b: &DiffArray,
        token_feats: &DiffArray,
        tokens: &SegmentTokens,
        grid: &GridSpec,
    ) -> Result<DiffArray, TensorError> {
        if tokens.live_count() == 0 {
            return Ok(f_b.clone());
        }
        let (h, w, c) = match f_b.shape() {
            [h, w, c] => (*h, *w, *c),
            other => {
                return Err(TensorError::BadRank { op: "bev_cross_attention", expected: 3, shape: other.to_vec() })
            }
        };
        if *token_feats.shape().last().unwrap() != c {
            return Err(TensorError::ShapeMismatch {
                op: "bev_cross_attention",
                left: f_b.shape().to_vec(),
                right: token_feats.shape().to_vec(),
            });
        }
        let wq = leaves.get(&format!("{}.wq", self.prefix))?;
        let wk = leaves.get(&format!("{}.wk", self.prefix))?;
        let wv = leaves.get(&format!("{}.wv", self.prefix))?;
        let wo = leaves.get(&format!("{}.wo", self.prefix))?;

        let flat = f_b.clone().reshaped(vec![h * w, c])?;
        let mut query_pe = vec![0.0; h * w * c];
        for r in 0..h {
            for col in 0..w {
                let center = grid.cell_center(r, col);
                let emb = sincos_embed(&center, c, &grid.window);
                query_pe[(r * w + col) * c..(r * w + col + 1) * c].copy_from_slice(&emb);
            }
        }
        let query_pe = DiffArray::new(vec![h * w, c], query_pe)?;
        let q_in = ops::add(rec, &flat, &query_pe)?;

        let mids = tokens.midpoints();
        let mut key_pe = vec![0.0; tokens.m * c];
        for (t, mid) in mids.iter().enumerate() {
            if tokens.mask[t] {
                key_pe[t * c..(t + 1) * c].copy_from_slice(&sincos_embed(mid, c, &grid.window));
            }
        }
        let key_pe = DiffArray::new(vec![tokens.m, c], key_pe)?;
        let k_in = ops::add(rec, token_feats, &key_pe)?;

        let q = ops::matmul(rec, &q_in, wq)?;
        let k = ops::matmul(rec, &k_in, wk)?;
        let v = ops::matmul(rec, token_feats, wv)?;
        let attended = multi_head_attention(rec, &q, &k, &v, &tokens.mask, self.heads)?;
        let projected = ops::matmul(rec, &attended, wo)?;
        let out = ops::add(rec, &flat, &projected)?;
        out.reshaped(vec![h, w, c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Window;
    use crate::sdmap::{Category, Polyline};

    fn window() -> Window {
        Window::new(-50.0, 50.0, -25.0, 25.0).unwrap()
    }

    fn road(points: Vec<Point>) -> Polyline {
        Polyline::new(Category::Road, points).unwrap()
    }

    #[test]
    fn tokenize_empty_map_is_fully_masked() {
        let map = LocalMap { polylines: vec![], window: window() };
        let tokens = tokenize(&map, 8, 5, 25.0);
        assert!(tokens.mask.iter().all(|&m| !m));
        assert!(tokens.points.iter().all(|&v| v == 0.0));
        assert_eq!(tokens.dropped, 0);
    }

    #[test]
    fn tokenize_short_road_single_token() {
        let map = LocalMap {
            polylines: vec![road(vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0)])],
            window: window(),
        };
        let tokens = tokenize(&map, 4, 3, 25.0);
        assert_eq!(tokens.live_count(), 1);
        let xs: Vec<f64> = (0..3).map(|i| tokens.points[i * 2]).collect();
        assert!((xs[0] - 0.0).abs() < 1e-12);
        assert!((xs[1] - 5.0).abs() < 1e-12);
        assert!((xs[2] - 10.0).abs() < 1e-12);
        assert_eq!(tokens.category[..3], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn tokenize_chunking_at_arc_length_multiples() {
        // 60 m road with l_max = 25 splits into chunks of 25 / 25 / 10 m.
        let map = LocalMap {
            polylines: vec![road(vec![Point::new(-30.0, 0.0), Point::new(30.0, 0.0)])],
            window: window(),
        };
        let tokens = tokenize(&map, 8, 5, 25.0);
        assert_eq!(tokens.live_count(), 3);
        let span = |t: usize| {
            let first = tokens.points[t * 5 * 2];
            let last = tokens.points[(t * 5 + 4) * 2];
            last - first
        };
        assert!((span(0) - 25.0).abs() < 1e-9);
        assert!((span(1) - 25.0).abs() < 1e-9);
        assert!((span(2) - 10.0).abs() < 1e-9);
        // chunks meet at consecutive arc positions
        assert!((tokens.points[(5 + 0) * 2] - (-5.0)).abs() < 1e-9);
        assert!((tokens.points[(2 * 5) * 2] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn tokenize_counts_dropped_chunks() {
        let map = LocalMap {
            polylines: vec![road(vec![Point::new(-30.0, 0.0), Point::new(30.0, 0.0)])],
            window: window(),
        };
        let tokens = tokenize(&map, 2, 5, 25.0);
        assert_eq!(tokens.live_count(), 2);
        assert_eq!(tokens.dropped, 1);
    }

    #[test]
    fn encoder_all_masked_gives_zero_output() {
        let enc = VectorEncoder::new("venc", 3, 8, 2, 2);
        let mut params = Params::new();
        let mut rng = SplitMix64::new(0);
        enc.init(&mut params, &mut rng);
        let rec = GradRecord::new();
        let leaves = params.leaves(&rec);
        let tokens = tokenize(&LocalMap { polylines: vec![], window: window() }, 4, 3, 25.0);
        let out = enc.forward(&rec, &leaves, &tokens).unwrap();
        assert_eq!(out.shape(), &[4, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_masked_rows_stay_exactly_zero() {
        let enc = VectorEncoder::new("venc", 3, 8, 2, 2);
        let mut params = Params::new();
        let mut rng = SplitMix64::new(0);
        enc.init(&mut params, &mut rng);
        let rec = GradRecord::new();
        let leaves = params.leaves(&rec);
        let map = LocalMap {
            polylines: vec![road(vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0)])],
            window: window(),
        };
        let tokens = tokenize(&map, 4, 3, 25.0);
        let out = enc.forward(&rec, &leaves, &tokens).unwrap();
        for t in 1..4 {
            assert!(out.data()[t * 8..(t + 1) * 8].iter().all(|&v| v == 0.0));
        }
        assert!(out.data()[..8].iter().any(|&v| v != 0.0));
    }

    fn cross_attention_fixture() -> (BevCrossAttention, Params, GridSpec) {
        let attn = BevCrossAttention::new("xattn", 8, 2);
        let mut params = Params::new();
        let mut rng = SplitMix64::new(3);
        attn.init(&mut params, &mut rng);
        let grid = GridSpec::with_default_cell(Window::new(-2.0, 2.0, -1.0, 1.0).unwrap());
        (attn, params, grid)
    }

    #[test]
    fn cross_attention_no_tokens_is_identity() {
        let (attn, params, grid) = cross_attention_fixture();
        let rec = GradRecord::new();
        let leaves = params.leaves(&rec);
        let f_b = DiffArray::new(vec![4, 2, 8], (0..64).map(|i| i as f64 * 0.01).collect()).unwrap();
        let tokens = tokenize(&LocalMap { polylines: vec![], window: grid.window }, 4, 3, 25.0);
        let token_feats = DiffArray::zeros(vec![4, 8]);
        let out = attn.forward(&rec, &leaves, &f_b, &token_feats, &tokens, &grid).unwrap();
        assert_eq!(out.data(), f_b.data());
    }

    #[test]
    fn cross_attention_single_token_broadcasts_its_value() {
        let (attn, params, grid) = cross_attention_fixture();
        let rec = GradRecord::new();
        let leaves = params.leaves(&rec);
        let f_b = DiffArray::zeros(vec![4, 2, 8]);
        let map = LocalMap {
            polylines: vec![road(vec![Point::new(-1.0, 0.0), Point::new(1.0, 0.0)])],
            window: grid.window,
        };
        let tokens = tokenize(&map, 4, 3, 25.0);
        assert_eq!(tokens.live_count(), 1);
        let mut feats = vec![0.0; 4 * 8];
        let mut rng = SplitMix64::new(7);
        for v in feats[..8].iter_mut() {
            *v = rng.next_gaussian();
        }
        let token_feats = DiffArray::new(vec![4, 8], feats).unwrap();
        let out = attn.forward(&rec, &leaves, &f_b, &token_feats, &tokens, &grid).unwrap();
        // softmax over one live token is exactly 1, so every cell receives
        // the same projected value
        let first = &out.data()[..8];
        for cell in 1..8 {
            for ch in 0..8 {
                assert!((out.data()[cell * 8 + ch] - first[ch]).abs() < 1e-12);
            }
        }
        assert!(first.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cross_attention_two_identical_tokens_match_single() {
        let (attn, params, grid) = cross_attention_fixture();
        let f_b = DiffArray::new(vec![4, 2, 8], (0..64).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let line = road(vec![Point::new(-1.0, 0.0), Point::new(1.0, 0.0)]);
        let map1 = LocalMap { polylines: vec![line.clone()], window: grid.window };
        let map2 = LocalMap { polylines: vec![line.clone(), line], window: grid.window };
        let t1 = tokenize(&map1, 4, 3, 25.0);
        let t2 = tokenize(&map2, 4, 3, 25.0);
        let mut rng = SplitMix64::new(7);
        let row: Vec<f64> = (0..8).map(|_| rng.next_gaussian()).collect();
        let mut feats1 = vec![0.0; 32];
        feats1[..8].copy_from_slice(&row);
        let mut feats2 = vec![0.0; 32];
        feats2[..8].copy_from_slice(&row);
        feats2[8..16].copy_from_slice(&row);
        let rec = GradRecord::new();
        let leaves = params.leaves(&rec);
        let out1 = attn
            .forward(&rec, &leaves, &f_b, &DiffArray::new(vec![4, 8], feats1).unwrap(), &t1, &grid)
            .unwrap();
        let out2 = attn
            .forward(&rec, &leaves, &f_b, &DiffArray::new(vec![4, 8], feats2).unwrap(), &t2, &grid)
            .unwrap();
        for (a, b) in out1.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-12, "weights must split 0.5/0.5");
        }
    }

    #[test]
    fn cross_attention_invariant_to_token_permutation() {
        let (attn, params, grid) = cross_attention_fixture();
        let enc = VectorEncoder::new("venc", 3, 8, 2, 2);
        let mut all = params;
        let mut rng = SplitMix64::new(1);
        enc.init(&mut all, &mut rng);

        let f_b = DiffArray::new(vec![4, 2, 8], (0..64).map(|i| (i as f64 * 0.11).cos()).collect())
            .unwrap();
        let pl_a = road(vec![Point::new(-1.5, 0.2), Point::new(1.5, 0.2)]);
        let pl_b = road(vec![Point::new(0.0, -0.8), Point::new(0.0, 0.8)]);
        let pl_c = Polyline::new(
            Category::Sidewalk,
            vec![Point::new(-1.0, -0.5), Point::new(1.0, -0.5)],
        )
        .unwrap();
        let forward = |polys: Vec<Polyline>| {
            let map = LocalMap { polylines: polys, window: grid.window };
            let tokens = tokenize(&map, 4, 3, 25.0);
            let rec = GradRecord::new();
            let leaves = all.leaves(&rec);
            let feats = enc.forward(&rec, &leaves, &tokens).unwrap();
            attn.forward(&rec, &leaves, &f_b, &feats, &tokens, &grid).unwrap()
        };
        let out_abc = forward(vec![pl_a.clone(), pl_b.clone(), pl_c.clone()]);
        let out_cab = forward(vec![pl_c, pl_a, pl_b]);
        for (x, y) in out_abc.data().iter().zip(out_cab.data()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}
