//! Resistive crossbar inner products.
//!
//! Rows are driven by voltages, columns collect current into a measuring
//! resistor `r_meas` to ground. With `r_meas = 0` a column delivers the ideal
//! product `sum_i v_i G_ij`; a finite resistor lifts the column node and
//! scales that sum by `1 / (1 + r_meas * sum_i G_ij)`.
//!
//! Signed weights use two physical rows per input: the positive row carries
//! `+v_i`, the negative row `-v_i`, and the unused device of each pair sits at
//! the OFF conductance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerSpec;

pub const MAX_TILE_DIM: usize = 128;

/// Row-major `rows x cols` matrix; rows are crossbar inputs, columns outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Copy of rows `r0..r1`, columns `c0..c1`.
    pub fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Matrix {
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for i in r0..r1 {
            data.extend_from_slice(&self.row(i)[c0..c1]);
        }
        Matrix {
            rows: r1 - r0,
            cols: c1 - c0,
            data,
        }
    }

    fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (a, g) in s.iter_mut().zip(self.row(i)) {
                *a += g;
            }
        }
        s
    }
}

fn check_dims(v: &[f64], g: &Matrix) -> Result<()> {
    if v.len() != g.rows {
        return Err(Error::Dimension {
            expected: g.rows,
            got: v.len(),
        });
    }
    Ok(())
}

fn check_r_meas(r_meas: f64) -> Result<()> {
    if !(r_meas >= 0.0 && r_meas.is_finite()) {
        return Err(Error::InvalidParam(format!("r_meas must be >= 0, got {r_meas}")));
    }
    Ok(())
}

/// `I_j = sum_i v_i G_ij`.
pub fn ideal_dot(v: &[f64], g: &Matrix) -> Result<Vec<f64>> {
    check_dims(v, g)?;
    let mut out = vec![0.0; g.cols];
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, gij) in out.iter_mut().zip(g.row(i)) {
            *o += vi * gij;
        }
    }
    Ok(out)
}

/// Column currents into a measuring resistor `r_meas`.
pub fn nonideal_dot(v: &[f64], g: &Matrix, r_meas: f64) -> Result<Vec<f64>> {
    check_r_meas(r_meas)?;
    let mut out = ideal_dot(v, g)?;
    if r_meas > 0.0 {
        for (o, s) in out.iter_mut().zip(g.column_sums()) {
            *o /= 1.0 + r_meas * s;
        }
    }
    Ok(out)
}

/// Ground truth by modified nodal analysis of the whole array.
///
/// Unknowns are every row node, every column node, and the current of each
/// row's ideal voltage source. Each cross-point is a conductance stamp between
/// its row and column node, each column has `1 / r_meas` to ground. Rows are
/// taken in `(v, g)` pairs so dual-rail arrays can be solved in one system:
/// pass `[(v, g_pos), (-v, g_neg)]`.
pub fn nodal_solve_oracle(drives: &[(&[f64], &Matrix)], r_meas: f64) -> Result<Vec<f64>> {
    if !(r_meas > 0.0 && r_meas.is_finite()) {
        return Err(Error::InvalidParam("nodal oracle needs r_meas > 0".into()));
    }
    let cols = drives.first().map(|d| d.1.cols).unwrap_or(0);
    let mut row_v = Vec::new();
    let mut row_g: Vec<&[f64]> = Vec::new();
    for (v, g) in drives {
        check_dims(v, g)?;
        if g.cols != cols {
            return Err(Error::Dimension {
                expected: cols,
                got: g.cols,
            });
        }
        for i in 0..g.rows {
            row_v.push(v[i]);
            row_g.push(g.row(i));
        }
    }
    let n_rows = row_v.len();
    let n_nodes = n_rows + cols;
    let n = n_nodes + n_rows;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (i, gr) in row_g.iter().enumerate() {
        for (j, &gij) in gr.iter().enumerate() {
            let (p, q) = (i, n_rows + j);
            a[(p, p)] += gij;
            a[(q, q)] += gij;
            a[(p, q)] -= gij;
            a[(q, p)] -= gij;
        }
    }
    for j in 0..cols {
        a[(n_rows + j, n_rows + j)] += 1.0 / r_meas;
    }
    for (i, &vi) in row_v.iter().enumerate() {
        let k = n_nodes + i;
        a[(i, k)] = 1.0;
        a[(k, i)] = 1.0;
        b[k] = vi;
    }
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numeric("singular nodal system".into()))?;
    Ok((0..cols).map(|j| x[n_rows + j] / r_meas).collect())
}

/// One physical array. `g_neg` is present for dual-rail (signed) arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossbarTile {
    pub g_pos: Matrix,
    pub g_neg: Option<Matrix>,
    pub r_meas: f64,
}

impl CrossbarTile {
    pub fn new(g_pos: Matrix, g_neg: Option<Matrix>, r_meas: f64) -> Result<Self> {
        check_r_meas(r_meas)?;
        let physical_rows = g_pos.rows * if g_neg.is_some() { 2 } else { 1 };
        if physical_rows > MAX_TILE_DIM || g_pos.cols > MAX_TILE_DIM {
            return Err(Error::InvalidParam(format!(
                "tile {physical_rows}x{} exceeds {MAX_TILE_DIM}x{MAX_TILE_DIM}",
                g_pos.cols
            )));
        }
        if let Some(n) = &g_neg {
            if (n.rows, n.cols) != (g_pos.rows, g_pos.cols) {
                return Err(Error::InvalidParam("G_pos and G_neg shapes differ".into()));
            }
        }
        let all = g_pos.data.iter().chain(g_neg.iter().flat_map(|m| m.data.iter()));
        if all.clone().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidParam("conductances must be positive".into()));
        }
        Ok(Self { g_pos, g_neg, r_meas })
    }

    pub fn rows(&self) -> usize {
        self.g_pos.rows
    }

    pub fn cols(&self) -> usize {
        self.g_pos.cols
    }

    /// Total conductance loading each column node.
    pub fn column_load(&self) -> Vec<f64> {
        let mut s = self.g_pos.column_sums();
        if let Some(n) = &self.g_neg {
            for (a, b) in s.iter_mut().zip(n.column_sums()) {
                *a += b;
            }
        }
        s
    }

    /// The nonideal column factor `1 / (1 + r_meas * load_j)`.
    pub fn column_scale(&self) -> Vec<f64> {
        self.column_load().iter().map(|s| 1.0 / (1.0 + self.r_meas * s)).collect()
    }

    /// Column currents for row drive `v`.
    pub fn currents(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut i = ideal_dot(v, &self.g_pos)?;
        if let Some(n) = &self.g_neg {
            for (a, b) in i.iter_mut().zip(ideal_dot(v, n)?) {
                *a -= b;
            }
        }
        for (a, s) in i.iter_mut().zip(self.column_scale()) {
            *a *= s;
        }
        Ok(i)
    }

    /// `(G_pos - G_neg) * column_scale`: drive-to-current map of this tile.
    pub fn effective(&self) -> Matrix {
        let scale = self.column_scale();
        let mut m = self.g_pos.clone();
        for i in 0..m.rows {
            for j in 0..m.cols {
                let neg = self.g_neg.as_ref().map_or(0.0, |n| n.get(i, j));
                m.set(i, j, (m.get(i, j) - neg) * scale[j]);
            }
        }
        m
    }
}

/// Grid of tiles covering a logical `rows x cols` conductance matrix.
/// Logical column `j` is the sum over tile-rows of the matching tile output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiledLayer {
    pub rows: usize,
    pub cols: usize,
    pub max_rows: usize,
    pub max_cols: usize,
    /// `tiles[tr][tc]` covers rows `tr*max_rows..`, columns `tc*max_cols..`.
    pub tiles: Vec<Vec<CrossbarTile>>,
}

pub fn tile_count(rows: usize, cols: usize, max_dim: usize) -> (usize, usize) {
    (rows.div_ceil(max_dim), cols.div_ceil(max_dim))
}

pub fn tile_layer(g_pos: &Matrix, g_neg: Option<&Matrix>, r_meas: f64, max_dim: usize) -> Result<TiledLayer> {
    tile_layer_rect(g_pos, g_neg, r_meas, max_dim, max_dim)
}

/// Tiling with separate row and column limits. A dual-rail array spends two
/// physical rows per logical row, so it fits `max_dim / 2` logical rows.
pub fn tile_layer_rect(
    g_pos: &Matrix,
    g_neg: Option<&Matrix>,
    r_meas: f64,
    max_rows: usize,
    max_cols: usize,
) -> Result<TiledLayer> {
    if g_pos.rows == 0 || g_pos.cols == 0 || max_rows == 0 || max_cols == 0 {
        return Err(Error::InvalidParam("tiling needs nonzero extents".into()));
    }
    let (tr, tc) = (g_pos.rows.div_ceil(max_rows), g_pos.cols.div_ceil(max_cols));
    let mut tiles = Vec::with_capacity(tr);
    for r in 0..tr {
        let (r0, r1) = (r * max_rows, ((r + 1) * max_rows).min(g_pos.rows));
        let mut row = Vec::with_capacity(tc);
        for c in 0..tc {
            let (c0, c1) = (c * max_cols, ((c + 1) * max_cols).min(g_pos.cols));
            row.push(CrossbarTile::new(
                g_pos.block(r0, r1, c0, c1),
                g_neg.map(|n| n.block(r0, r1, c0, c1)),
                r_meas,
            )?);
        }
        tiles.push(row);
    }
    Ok(TiledLayer {
        rows: g_pos.rows,
        cols: g_pos.cols,
        max_rows,
        max_cols,
        tiles,
    })
}

impl TiledLayer {
    pub fn tile_count(&self) -> usize {
        self.tiles.iter().map(Vec::len).sum()
    }

    /// Runs every tile and applies the summation plan (tile-rows ascending).
    pub fn currents(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::Dimension {
                expected: self.rows,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, row) in self.tiles.iter().enumerate() {
            let r0 = r * self.max_rows;
            for (c, tile) in row.iter().enumerate() {
                let c0 = c * self.max_cols;
                let part = tile.currents(&v[r0..r0 + tile.rows()])?;
                for (o, p) in out[c0..c0 + tile.cols()].iter_mut().zip(part) {
                    *o += p;
                }
            }
        }
        Ok(out)
    }

    /// Logical drive-to-current matrix with each tile's column factor folded
    /// in; a plain product with it equals [`TiledLayer::currents`].
    pub fn effective(&self) -> Matrix {
        let mut m = Matrix::filled(self.rows, self.cols, 0.0);
        for (r, row) in self.tiles.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                let e = tile.effective();
                for i in 0..e.rows {
                    for j in 0..e.cols {
                        m.set(r * self.max_rows + i, c * self.max_cols + j, e.get(i, j));
                    }
                }
            }
        }
        m
    }

    /// Reassembles the logical `(G_pos, G_neg)` matrices.
    pub fn conductances(&self) -> (Matrix, Option<Matrix>) {
        let dual = self.tiles[0][0].g_neg.is_some();
        let mut pos = Matrix::filled(self.rows, self.cols, 0.0);
        let mut neg = dual.then(|| Matrix::filled(self.rows, self.cols, 0.0));
        for (r, row) in self.tiles.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                for i in 0..tile.rows() {
                    for j in 0..tile.cols() {
                        let (gi, gj) = (r * self.max_rows + i, c * self.max_cols + j);
                        pos.set(gi, gj, tile.g_pos.get(i, j));
                        if let (Some(n), Some(tn)) = (neg.as_mut(), tile.g_neg.as_ref()) {
                            n.set(gi, gj, tn.get(i, j));
                        }
                    }
                }
            }
        }
        (pos, neg)
    }
}

/// im2col indexing for a valid stride-1 convolution: `patches[p]` lists the
/// flat input indices feeding output position `p`, ordered
/// `[channel][ky][kx]` to match the kernel matrix rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatherPlan {
    pub patch_len: usize,
    pub positions: usize,
    pub indices: Vec<u32>,
}

impl GatherPlan {
    pub fn patch(&self, p: usize) -> &[u32] {
        &self.indices[p * self.patch_len..(p + 1) * self.patch_len]
    }
}

/// Kernel matrix (`c_in*k*k` rows, one column per output channel) plus gather
/// plan. Output `(o, p)` of the convolution is column `o` applied to patch `p`.
pub fn conv_to_matrix(spec: &LayerSpec, [c, h, w]: [usize; 3], weights: &[f64]) -> Result<(Matrix, GatherPlan)> {
    let LayerSpec::Conv {
        kernel: k,
        in_channels,
        out_channels,
    } = *spec
    else {
        return Err(Error::InvalidParam("conv_to_matrix needs a Conv layer".into()));
    };
    spec.output_shape(0, [c, h, w])?;
    let patch_len = in_channels * k * k;
    if weights.len() != out_channels * patch_len {
        return Err(Error::Dimension {
            expected: out_channels * patch_len,
            got: weights.len(),
        });
    }
    let mut m = Matrix::filled(patch_len, out_channels, 0.0);
    for o in 0..out_channels {
        for r in 0..patch_len {
            m.set(r, o, weights[o * patch_len + r]);
        }
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut indices = Vec::with_capacity(oh * ow * patch_len);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        indices.push(((ch * h + y + ky) * w + x + kx) as u32);
                    }
                }
            }
        }
    }
    Ok((
        m,
        GatherPlan {
            patch_len,
            positions: oh * ow,
            indices,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv_forward;
    use crate::rng::{Purpose, StreamKey};
    use proptest::prelude::*;
    use rand::Rng;

    const G_OFF: f64 = 1.0 / 5e8;
    const G_MAX: f64 = 1.0 / 5e5;

    fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
        (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp()
    }

    fn random_g<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| log_uniform(rng, G_OFF, G_MAX)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn ideal_examples() {
        let g = Matrix::new(2, 1, vec![1e-6, 1e-6]).unwrap();
        assert_eq!(ideal_dot(&[0.0, 0.0], &g).unwrap(), vec![0.0]);
        assert_eq!(ideal_dot(&[1.0, 1.0], &g).unwrap(), vec![2e-6]);
        assert!(matches!(ideal_dot(&[1.0], &g), Err(Error::Dimension { .. })));

        let mut rng = StreamKey::new(1, Purpose::Test, 0, 0).rng();
        let g = random_g(&mut rng, 8, 8);
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = ideal_dot(&v, &g).unwrap();
        for (j, f) in fast.iter().enumerate() {
            let mut naive = 0.0;
            for (i, vi) in v.iter().enumerate() {
                naive += vi * g.get(i, j);
            }
            assert!(rel(*f, naive) < 1e-15);
        }
    }

    #[test]
    fn nonideal_examples() {
        let g = Matrix::new(2, 1, vec![1e-6, 1e-6]).unwrap();
        let v = [1.0, 1.0];
        assert_eq!(nonideal_dot(&v, &g, 0.0).unwrap(), ideal_dot(&v, &g).unwrap());
        let i = nonideal_dot(&v, &g, 1e3).unwrap()[0];
        assert!(rel(i, 1.996_007_984_031_936e-6) < 1e-15);
        let oracle = nodal_solve_oracle(&[(&v, &g)], 1e3).unwrap()[0];
        assert!(rel(i, oracle) < 1e-12);
        assert!(nonideal_dot(&v, &g, -1.0).is_err());
    }

    #[test]
    fn oracle_single_cell_divider() {
        let g = Matrix::new(1, 1, vec![1e-6]).unwrap();
        let i = nodal_solve_oracle(&[(&[1.0], &g)], 1e6).unwrap()[0];
        assert!(rel(i, 0.5e-6) < 1e-12);
        assert!(nodal_solve_oracle(&[(&[1.0], &g)], 0.0).is_err());
    }

    #[test]
    fn oracle_matches_fast_path_on_random_instances() {
        let mut rng = StreamKey::new(2, Purpose::Test, 0, 0).rng();
        let mut worst: f64 = 0.0;
        for case in 0..1000 {
            let n = rng.random_range(1..=16);
            let m = rng.random_range(1..=16);
            let r_meas = log_uniform(&mut rng, 10.0, 1e5);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let g = random_g(&mut rng, n, m);
            let (fast, oracle) = if case % 2 == 0 {
                (nonideal_dot(&v, &g, r_meas).unwrap(), nodal_solve_oracle(&[(&v, &g)], r_meas).unwrap())
            } else {
                let gn = random_g(&mut rng, n, m);
                let neg: Vec<f64> = v.iter().map(|x| -x).collect();
                let tile = CrossbarTile::new(g.clone(), Some(gn.clone()), r_meas).unwrap();
                (tile.currents(&v).unwrap(), nodal_solve_oracle(&[(&v, &g), (&neg, &gn)], r_meas).unwrap())
            };
            for (a, b) in fast.iter().zip(&oracle) {
                worst = worst.max(rel(*a, *b));
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn oracle_approaches_ideal_as_r_meas_vanishes() {
        let mut rng = StreamKey::new(3, Purpose::Test, 0, 0).rng();
        let g = random_g(&mut rng, 10, 4);
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let ideal = ideal_dot(&v, &g).unwrap();
        let near = nodal_solve_oracle(&[(&v, &g)], 1e-6).unwrap();
        for (a, b) in ideal.iter().zip(&near) {
            assert!(rel(*a, *b) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn nonideal_bounded_and_monotone_in_r_meas(seed in 0u64..1000, r in 1.0f64..1e5) {
            let mut rng = StreamKey::new(seed, Purpose::Test, 1, 0).rng();
            let g = random_g(&mut rng, 12, 5);
            let v: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..1.0)).collect();
            let ideal = ideal_dot(&v, &g).unwrap();
            let lo = nonideal_dot(&v, &g, r).unwrap();
            let hi = nonideal_dot(&v, &g, r * 1.5).unwrap();
            for j in 0..5 {
                prop_assert!(lo[j] <= ideal[j]);
                prop_assert!(hi[j] < lo[j]);
            }
        }
    }

    #[test]
    fn tile_counts() {
        let g = |r, c| Matrix::filled(r, c, G_OFF);
        let t = tile_layer(&g(100, 100), None, 0.0, MAX_TILE_DIM).unwrap();
        assert_eq!(t.tile_count(), 1);
        let t = tile_layer(&g(1920, 10), None, 0.0, MAX_TILE_DIM).unwrap();
        assert_eq!((t.tiles.len(), t.tiles[0].len()), (15, 1));
        let t = tile_layer(&g(129, 129), None, 0.0, MAX_TILE_DIM).unwrap();
        assert_eq!((t.tiles.len(), t.tiles[0].len()), (2, 2));
        assert_eq!(t.tiles[1][1].rows(), 1);
    }

    #[test]
    fn tiling_preserves_output_without_r_meas() {
        let mut rng = StreamKey::new(4, Purpose::Test, 0, 0).rng();
        let (gp, gn) = (random_g(&mut rng, 300, 140), random_g(&mut rng, 300, 140));
        let v: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
        let untiled = CrossbarTile {
            g_pos: gp.clone(),
            g_neg: Some(gn.clone()),
            r_meas: 0.0,
        };
        let t = tile_layer_rect(&gp, Some(&gn), 0.0, MAX_TILE_DIM / 2, MAX_TILE_DIM).unwrap();
        let a = untiled.currents(&v).unwrap();
        let b = t.currents(&v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(rel(*x, *y) < 1e-12);
        }
        let (p, n) = t.conductances();
        assert_eq!(p, gp);
        assert_eq!(n.unwrap(), gn);

        // With a measuring resistor each tile sees only its own rows' load,
        // so tiled currents are larger than the untiled ones.
        let t = tile_layer(&gp, None, 1e3, MAX_TILE_DIM).unwrap();
        let tiled = t.currents(&v).unwrap();
        let flat = nonideal_dot(&v, &gp, 1e3).unwrap();
        assert!(tiled.iter().zip(&flat).all(|(a, b)| a > b));

        // The folded matrix reproduces the tile-by-tile evaluation.
        let folded = ideal_dot(&v, &t.effective()).unwrap();
        for (x, y) in folded.iter().zip(&tiled) {
            assert!(rel(*x, *y) < 1e-12);
        }
    }

    #[test]
    fn conv_matrix_matches_direct_convolution() {
        let mut rng = StreamKey::new(5, Purpose::Test, 0, 0).rng();
        for (c, h, w, k, co) in [(1, 28, 28, 5, 6), (3, 9, 7, 3, 4), (2, 5, 5, 1, 3)] {
            let spec = LayerSpec::Conv {
                kernel: k,
                in_channels: c,
                out_channels: co,
            };
            let weights: Vec<f64> = (0..co * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let input: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            let (m, plan) = conv_to_matrix(&spec, [c, h, w], &weights).unwrap();
            assert_eq!(m.rows(), c * k * k);
            let (oh, ow) = (h - k + 1, w - k + 1);
            let mut direct = vec![0.0; co * oh * ow];
            conv_forward(&input, [c, h, w], &weights, k, co, &mut direct);
            for p in 0..plan.positions {
                let patch: Vec<f64> = plan.patch(p).iter().map(|&i| input[i as usize]).collect();
                let out = ideal_dot(&patch, &m).unwrap();
                for o in 0..co {
                    let d = direct[o * oh * ow + p];
                    assert!((out[o] - d).abs() <= 1e-12 * d.abs().max(1.0));
                }
            }
            if k == 1 {
                let ident: Vec<u32> = (0..(h * w) as u32)
                    .flat_map(|p| (0..c as u32).map(move |ch| ch * (h * w) as u32 + p))
                    .collect();
                assert_eq!(plan.indices, ident);
            }
        }
        let too_big = LayerSpec::Conv {
            kernel: 6,
            in_channels: 1,
            out_channels: 1,
        };
        assert!(conv_to_matrix(&too_big, [1, 5, 5], &[0.0; 36]).is_err());
    }
}
