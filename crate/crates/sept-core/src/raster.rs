//! Rasterized SD-map branch: supercover rasterization, a small convolutional
//! encoder, and the feature transformation that aligns the rasterized feature
//! to the BEV space with per-channel scale/shift modulation.

use crate::geom::{clip_segment_params, GridSpec, Point};
use crate::nn::{init_weight, init_zeros, pointwise, ConvStack};
use crate::pgm::write_pgm;
use crate::rng::SplitMix64;
use crate::sdmap::{Category, LocalMap};
use crate::tensor::{ops, DiffArray, GradRecord, LeafParams, Params, TensorError};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("map window {map:?} does not match grid window {grid:?}")]
    WindowMismatch { map: crate::geom::Window, grid: crate::geom::Window },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary occupancy grid with one channel per SD-map category
/// (road, crosswalk, sidewalk).
#[derive(Clone, Debug, PartialEq)]
pub struct RasterTile {
    pub h: usize,
    pub w: usize,
    /// Row-major [h][w][3] in {0, 1}.
    pub grid: Vec<u8>,
}

impl RasterTile {
    pub fn zeros(h: usize, w: usize) -> Self {
        RasterTile { h, w, grid: vec![0; h * w * 3] }
    }

    pub fn get(&self, r: usize, c: usize, channel: usize) -> u8 {
        self.grid[(r * self.w + c) * 3 + channel]
    }

    fn set(&mut self, r: usize, c: usize, channel: usize) {
        self.grid[(r * self.w + c) * 3 + channel] = 1;
    }

    /// The tile as an [H, W, 3] float array for the encoder.
    pub fn to_array(&self) -> DiffArray {
        let data: Vec<f64> = self.grid.iter().map(|&v| v as f64).collect();
        DiffArray::new(vec![self.h, self.w, 3], data).expect("tile dimensions consistent")
    }

    /// Export each category channel as a PGM image (0 -> 0, 1 -> 255);
    /// files are named `{stem}_{category}.pgm`.
    pub fn export_pgm(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        for cat in Category::ALL {
            let ch = cat.channel();
            let values: Vec<f64> = (0..self.h * self.w)
                .map(|i| self.grid[i * 3 + ch] as f64)
                .collect();
            write_pgm(&dir.join(format!("{stem}_{}.pgm", cat.as_str())), self.h, self.w, &values)?;
        }
        Ok(())
    }
}

/// Cells covered by a segment under the supercover contract.
///
/// A cell is covered when the segment passes through its closed square at an
/// interior parameter (t strictly inside (0, 1) survives clipping), which
/// marks both side cells when the segment runs along a grid line or crosses
/// a corner. Degenerate (point-like) segments mark the half-open floor cell
/// of the point. Endpoint-only corner contacts do not mark the far cell.
pub fn supercover_cells(grid: &GridSpec, p0: &Point, p1: &Point) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    if p0.dist(p1) <= 1e-9 {
        if let Some(cell) = grid.cell_of(p0) {
            cells.push(cell);
        }
        return cells;
    }
    let (u0, v0) = grid.grid_coord(p0);
    let (u1, v1) = grid.grid_coord(p1);
    let a = Point::new(u0, v0);
    let b = Point::new(u1, v1);
    let rows = grid.rows() as isize;
    let cols = grid.cols() as isize;
    let r_lo = (u0.min(u1).floor() as isize - 1).max(0);
    let r_hi = (u0.max(u1).floor() as isize + 1).min(rows - 1);
    for r in r_lo..=r_hi {
        // parameter interval where the segment overlaps this row slab
        let Some((ts0, ts1)) =
            clip_segment_params(&a, &b, r as f64, (r + 1) as f64, f64::NEG_INFINITY, f64::INFINITY)
        else {
            continue;
        };
        let va = v0 + ts0 * (v1 - v0);
        let vb = v0 + ts1 * (v1 - v0);
        let c_lo = (va.min(vb).floor() as isize - 1).max(0);
        let c_hi = (va.max(vb).floor() as isize + 1).min(cols - 1);
        for c in c_lo..=c_hi {
            if let Some((t0, t1)) =
                clip_segment_params(&a, &b, r as f64, (r + 1) as f64, c as f64, (c + 1) as f64)
            {
                if t1 > 0.0 && t0 < 1.0 {
                    cells.push((r as usize, c as usize));
                }
            }
        }
    }
    cells
}

/// Rasterize the SD map onto the grid; each polyline segment stamps its
/// supercover cells into the polyline's category channel. Repeating a
/// polyline is a no-op (the grid is a union of cell sets).
pub fn rasterize(map: &LocalMap, grid: &GridSpec) -> Result<RasterTile, RasterError> {
    if map.window != grid.window {
        return Err(RasterError::WindowMismatch { map: map.window, grid: grid.window });
    }
    let mut tile = RasterTile::zeros(grid.rows(), grid.cols());
    for pl in &map.polylines {
        let channel = pl.category.channel();
        for seg in pl.points.windows(2) {
            for (r, c) in supercover_cells(grid, &seg[0], &seg[1]) {
                tile.set(r, c, channel);
            }
        }
    }
    Ok(tile)
}

/// Convolutional encoder for the raster tile: `blocks` spatial-preserving
/// 3x3 blocks mapping 3 -> `channels`.
pub struct RasterEncoder {
    stack: ConvStack,
}

impl RasterEncoder {
    pub fn new(prefix: impl Into<String>, channels: usize, blocks: usize) -> Self {
        RasterEncoder { stack: ConvStack::new(prefix, 3, channels, blocks) }
    }

    pub fn init(&self, params: &mut Params, rng: &mut SplitMix64) {
        self.stack.init(params, rng);
    }

    pub fn forward(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        tile: &DiffArray,
    ) -> Result<DiffArray, TensorError> {
        self.stack.forward(rec, leaves, tile)
    }
}

/// Per-channel modulation parameters predicted by the feature transform.
pub struct FilmParams {
    pub gamma: DiffArray,
    pub beta: DiffArray,
}

/// Predicts per-channel (gamma, beta) from the pooled difference between the
/// projected raster feature and the projected conditioning feature.
///
/// The output head is zero-initialized and gamma is parameterized as
/// 1 + delta, so a freshly initialized module is an exact identity.
pub struct FeatureTransform {
    pub prefix: String,
    pub channels: usize,
    /// Share the two input projections instead of learning them separately.
    pub shared_projections: bool,
}

impl FeatureTransform {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        FeatureTransform { prefix: prefix.into(), channels, shared_projections: false }
    }

    pub fn init(&self, params: &mut Params, rng: &mut SplitMix64) {
        let c = self.channels;
        init_weight(params, format!("{}.proj_r.weight", self.prefix), vec![c, c], c, rng);
        init_zeros(params, format!("{}.proj_r.bias", self.prefix), vec![c]);
        if !self.shared_projections {
            init_weight(params, format!("{}.proj_v.weight", self.prefix), vec![c, c], c, rng);
            init_zeros(params, format!("{}.proj_v.bias", self.prefix), vec![c]);
        }
        init_weight(params, format!("{}.mlp.w1", self.prefix), vec![c, c], c, rng);
        init_zeros(params, format!("{}.mlp.b1", self.prefix), vec![c]);
        // zero-initialized head: identity start
        init_zeros(params, format!("{}.mlp.w2", self.prefix), vec![c, 2 * c]);
        init_zeros(params, format!("{}.mlp.b2", self.prefix), vec![2 * c]);
    }

    /// Compute (gamma, beta) from the rasterized SD feature and the
    /// conditioning BEV feature.
    pub fn forward(
        &self,
        rec: &GradRecord,
        leaves: &LeafParams,
        f_sd_r: &DiffArray,
        f_cond: &DiffArray,
    ) -> Result<FilmParams, TensorError> {
        if f_sd_r.shape() != f_cond.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "feature_transform",
                left: f_sd_r.shape().to_vec(),
                right: f_cond.shape().to_vec(),
            });
        }
        let c = self.channels;
        let wr = leaves.get(&format!("{}.proj_r.weight", self.prefix))?;
        let br = leaves.get(&format!("{}.proj_r.bias", self.prefix))?;
        let (wv, bv) = if self.shared_projections {
            (wr, br)
        } else {
            (
                leaves.get(&format!("{}.proj_v.weight", self.prefix))?,
                leaves.get(&format!("{}.proj_v.bias", self.prefix))?,
            )
        };
        let pr = pointwise(rec, f_sd_r, wr, Some(br))?;
        let pv = pointwise(rec, f_cond, wv, Some(bv))?;
        let delta = ops::sub(rec, &pr, &pv)?;
        let pooled = ops::global_max_pool(rec, &delta)?.reshaped(vec![1, c])?;

        let w1 = leaves.get(&format!("{}.mlp.w1", self.prefix))?;
        let b1 = leaves.get(&format!("{}.mlp.b1", self.prefix))?;
        let w2 = leaves.get(&format!("{}.mlp.w2", self.prefix))?;
        let b2 = leaves.get(&format!("{}.mlp.b2", self.prefix))?;
        let hidden = ops::relu(rec, &crate::nn::linear(rec, &pooled, w1, Some(b1))?)?;
        // conservative head gain: modulation moves slowly away from the
        // identity, which keeps the per-scene scale/shift from jittering
        // the fused features early in training
        let head = ops::scale(rec, &crate::nn::linear(rec, &hidden, w2, Some(b2))?, 0.25)?;
        let delta_gamma = ops::slice_last(rec, &head, 0, c)?.reshaped(vec![c])?;
        let beta = if std::env::var("SEPT_FT_GAMMA_ONLY").is_ok() {
            DiffArray::zeros(vec![c])
        } else {
            ops::slice_last(rec, &head, c, 2 * c)?.reshaped(vec![c])?
        };
        let gamma = ops::add(rec, &DiffArray::full(vec![c], 1.0), &delta_gamma)?;
        Ok(FilmParams { gamma, beta })
    }
}

/// Apply per-channel modulation: out[h, w, c] = gamma[c] * x[h, w, c] + beta[c].
pub fn film_modulate(
    rec: &GradRecord,
    x: &DiffArray,
    params: &FilmParams,
) -> Result<DiffArray, TensorError> {
    let scaled = ops::mul_channels(rec, x, &params.gamma)?;
    ops::add_channels(rec, &scaled, &params.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Window;
    use crate::sdmap::Polyline;

    fn bev_grid() -> GridSpec {
        GridSpec::with_default_cell(Window::new(-50.0, 50.0, -25.0, 25.0).unwrap())
    }

    /// Independent supercover oracle: closed cell square against the open
    /// segment, decided by point containment and edge crossings rather than
    /// parametric clipping.
    fn oracle_covers(grid: &GridSpec, p0: &Point, p1: &Point, r: usize, c: usize) -> bool {
        use crate::geom::segment_intersection;
        let (u0, v0) = grid.grid_coord(p0);
        let (u1, v1) = grid.grid_coord(p1);
        let a = Point::new(u0, v0);
        let b = Point::new(u1, v1);
        let (x0, x1, y0, y1) = (r as f64, r as f64 + 1.0, c as f64, c as f64 + 1.0);
        let inside = |p: &Point| p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;
        // sample interior points of the segment; if any lies in the closed
        // square the open segment certainly intersects it
        for k in 1..200 {
            let t = k as f64 / 200.0;
            if inside(&a.lerp(&b, t)) {
                return true;
            }
        }
        // otherwise check edge crossings at interior parameters
        let corners =
            [Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1)];
        for i in 0..4 {
            let e0 = corners[i];
            let e1 = corners[(i + 1) % 4];
            if let Some(hit) = segment_intersection(&a, &b, &e0, &e1, false) {
                let t = if (b.x - a.x).abs() > (b.y - a.y).abs() {
                    (hit.x - a.x) / (b.x - a.x)
                } else {
                    (hit.y - a.y) / (b.y - a.y)
                };
                if t > 1e-12 && t < 1.0 - 1e-12 {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn empty_map_rasterizes_to_zero() {
        let grid = bev_grid();
        let map = LocalMap { polylines: vec![], window: grid.window };
        let tile = rasterize(&map, &grid).unwrap();
        assert!(tile.grid.iter().all(|&v| v == 0));
    }

    #[test]
    fn point_like_segment_marks_floor_cell() {
        let grid = bev_grid();
        let cells = supercover_cells(&grid, &Point::new(0.0, 0.0), &Point::new(0.0, 0.0));
        assert_eq!(cells, vec![(100, 50)]);
    }

    #[test]
    fn diagonal_unit_segment_covers_four_cells() {
        let grid = bev_grid();
        let mut cells = supercover_cells(&grid, &Point::new(0.0, 0.0), &Point::new(1.0, 1.0));
        cells.sort_unstable();
        assert_eq!(cells, vec![(100, 50), (100, 51), (101, 50), (101, 51)]);
    }

    #[test]
    fn supercover_agrees_with_geometric_oracle_on_random_segments() {
        let grid = bev_grid();
        let mut rng = SplitMix64::new(11);
        for _ in 0..100 {
            let p0 = Point::new(rng.uniform(-49.0, 49.0), rng.uniform(-24.0, 24.0));
            let p1 = Point::new(rng.uniform(-49.0, 49.0), rng.uniform(-24.0, 24.0));
            let mut got = supercover_cells(&grid, &p0, &p1);
            got.sort_unstable();
            got.dedup();
            // oracle over the padded bounding box of the segment
            let (u0, v0) = grid.grid_coord(&p0);
            let (u1, v1) = grid.grid_coord(&p1);
            let r_lo = (u0.min(u1).floor() as isize - 2).max(0) as usize;
            let r_hi = ((u0.max(u1).floor() as isize) + 2).min(grid.rows() as isize - 1) as usize;
            let c_lo = (v0.min(v1).floor() as isize - 2).max(0) as usize;
            let c_hi = ((v0.max(v1).floor() as isize) + 2).min(grid.cols() as isize - 1) as usize;
            let mut expected = Vec::new();
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    if oracle_covers(&grid, &p0, &p1, r, c) {
                        expected.push((r, c));
                    }
                }
            }
            assert_eq!(got, expected, "segment {p0:?} -> {p1:?}");
        }
    }

    #[test]
    fn rasterize_is_idempotent_and_order_independent() {
        let grid = bev_grid();
        let a = Polyline::new(
            Category::Road,
            vec![Point::new(-10.0, -5.0), Point::new(12.0, 7.0)],
        )
        .unwrap();
        let b = Polyline::new(
            Category::Crosswalk,
            vec![Point::new(3.0, -8.0), Point::new(3.0, 8.0)],
        )
        .unwrap();
        let t1 = rasterize(
            &LocalMap { polylines: vec![a.clone(), b.clone()], window: grid.window },
            &grid,
        )
        .unwrap();
        let t2 = rasterize(
            &LocalMap { polylines: vec![b.clone(), a.clone(), a.clone()], window: grid.window },
            &grid,
        )
        .unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn raster_window_mismatch_rejected() {
        let grid = bev_grid();
        let map = LocalMap {
            polylines: vec![],
            window: Window::new(-10.0, 10.0, -5.0, 5.0).unwrap(),
        };
        assert!(matches!(rasterize(&map, &grid), Err(RasterError::WindowMismatch { .. })));
    }

    #[test]
    fn film_identity_at_initialization_is_bit_exact() {
        let c = 8;
        let ft = FeatureTransform::new("ft", c);
        let mut params = Params::new();
        let mut rng = SplitMix64::new(0);
        ft.init(&mut params, &mut rng);

        let rec = GradRecord::new();
        let leaves = params.leaves(&rec);
        let mut data = Vec::new();
        let mut gen = SplitMix64::new(5);
        for _ in 0..6 * 4 * c {
            data.push(gen.next_gaussian().abs()); // non-negative like post-relu features
        }
        let f_sd_r = DiffArray::new(vec![6, 4, c], data).unwrap();
        let f_cond = DiffArray::full(vec![6, 4, c], 0.3);
        let film = ft.forward(&rec, &leaves, &f_sd_r, &f_cond).unwrap();
        assert!(film.gamma.data().iter().all(|&g| g == 1.0));
        assert!(film.beta.data().iter().all(|&b| b == 0.0));
        let out = film_modulate(&rec, &f_sd_r, &film).unwrap();
        for (x, y) in f_sd_r.data().iter().zip(out.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn film_modulate_matches_elementwise_oracle() {
        let rec = GradRecord::new();
        let mut rng = SplitMix64::new(9);
        let x_data: Vec<f64> = (0..3 * 3 * 2).map(|_| rng.next_gaussian()).collect();
        let x = DiffArray::new(vec![3, 3, 2], x_data.clone()).unwrap();
        let gamma = DiffArray::vector(vec![1.5, -0.25]);
        let beta = DiffArray::vector(vec![0.1, 2.0]);
        let film = FilmParams { gamma: gamma.clone(), beta: beta.clone() };
        let out = film_modulate(&rec, &x, &film).unwrap();
        for i in 0..9 {
            for ch in 0..2 {
                let expected = gamma.data()[ch] * x_data[i * 2 + ch] + beta.data()[ch];
                assert!((out.data()[i * 2 + ch] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn film_constant_gamma_zero_collapses_to_beta() {
        let rec = GradRecord::new();
        let x = DiffArray::full(vec![4, 4, 3], 7.0);
        let film = FilmParams {
            gamma: DiffArray::vector(vec![0.0, 0.0, 0.0]),
            beta: DiffArray::vector(vec![1.0, -2.0, 0.5]),
        };
        let out = film_modulate(&rec, &x, &film).unwrap();
        for i in 0..16 {
            assert_eq!(out.data()[i * 3..(i + 1) * 3], [1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn film_composition_law() {
        // film(g2, b2) ∘ film(g1, b1) == film(g2 g1, g2 b1 + b2)
        let rec = GradRecord::new();
        let mut rng = SplitMix64::new(4);
        let x = DiffArray::new(vec![2, 2, 3], (0..12).map(|_| rng.next_gaussian()).collect()).unwrap();
        let g1 = DiffArray::vector(vec![1.1, 0.9, -0.5]);
        let b1 = DiffArray::vector(vec![0.2, -0.1, 0.3]);
        let g2 = DiffArray::vector(vec![0.7, 2.0, 1.5]);
        let b2 = DiffArray::vector(vec![-0.4, 0.5, 0.0]);
        let once = film_modulate(
            &rec,
            &film_modulate(&rec, &x, &FilmParams { gamma: g1.clone(), beta: b1.clone() }).unwrap(),
            &FilmParams { gamma: g2.clone(), beta: b2.clone() },
        )
        .unwrap();
        let composed_gamma =
            DiffArray::vector(g1.data().iter().zip(g2.data()).map(|(a, b)| a * b).collect());
        let composed_beta = DiffArray::vector(
            b1.data()
                .iter()
                .zip(g2.data())
                .zip(b2.data())
                .map(|((b1v, g2v), b2v)| g2v * b1v + b2v)
                .collect(),
        );
        let fused =
            film_modulate(&rec, &x, &FilmParams { gamma: composed_gamma, beta: composed_beta })
                .unwrap();
        for (a, b) in once.data().iter().zip(fused.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ft_sees_zero_context_for_identical_inputs_with_shared_projections() {
        let c = 4;
        let ft = FeatureTransform {
            prefix: "ft".into(),
            channels: c,
            shared_projections: true,
        };
        let mut params = Params::new();
        let mut rng = SplitMix64::new(1);
        ft.init(&mut params, &mut rng);
        // identical inputs through identical projections -> zero difference;
        // with the zero-initialized head the result is the identity either
        // way, so probe the pooled context through gamma after nudging w2.
        if let Some(w2) = params.get_mut("ft.mlp.w2") {
            for v in w2.data_mut().iter_mut() {
                *v = 1.0;
            }
        }
        if let Some(b1) = params.get_mut("ft.mlp.b1") {
            for v in b1.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        let rec = GradRecord::new();
        let leaves = params.leaves(&rec);
        let x = DiffArray::new(vec![3, 2, c], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let film = ft.forward(&rec, &leaves, &x, &x).unwrap();
        // F_delta == 0 -> pooled context 0 -> relu(0) = 0 -> head = b2 = 0
        assert!(film.gamma.data().iter().all(|&g| g == 1.0));
        assert!(film.beta.data().iter().all(|&b| b == 0.0));
    }
}
