use crate::error::Result;
use crate::scoring::check_layer;
use crate::trace::EmbeddingTrace;

/// Per-channel prefix sums of a `W x H x d` patch grid.
///
/// Entry `(y, x)` holds the sum over all patches with `y' < y` and `x' < x`,
/// so row 0 and column 0 are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SummedAreaTable {
    width: usize,
    height: usize,
    dim: usize,
    /// `[(H+1)][(W+1)][d]` flattened.
    table: Vec<f64>,
}

impl SummedAreaTable {
    /// Builds from a row-major `[H][W][d]` grid.
    pub fn from_grid<T: Copy + Into<f64>>(width: usize, height: usize, dim: usize, values: &[T]) -> Self {
        assert_eq!(values.len(), width * height * dim, "grid extent mismatch");
        let stride = (width + 1) * dim;
        let mut table = vec![0.0f64; (height + 1) * stride];
        let mut row_sum = vec![0.0f64; dim];
        for y in 0..height {
            row_sum.iter_mut().for_each(|v| *v = 0.0);
            for x in 0..width {
                let cell = &values[(y * width + x) * dim..(y * width + x + 1) * dim];
                let above = y * stride + (x + 1) * dim;
                let here = (y + 1) * stride + (x + 1) * dim;
                for c in 0..dim {
                    row_sum[c] += cell[c].into();
                    table[here + c] = table[above + c] + row_sum[c];
                }
            }
        }
        Self {
            width,
            height,
            dim,
            table,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Prefix-sum vector at corner `(y, x)`, `0 <= y <= H`, `0 <= x <= W`.
    pub fn corner(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * (self.width + 1) + x) * self.dim;
        &self.table[start..start + self.dim]
    }

    /// Row `y` of corners, `[(W+1)][d]` flattened.
    pub(crate) fn corner_row(&self, y: usize) -> &[f64] {
        let stride = (self.width + 1) * self.dim;
        &self.table[y * stride..(y + 1) * stride]
    }

    /// Per-channel sum over the inclusive box `x1..=x2`, `y1..=y2`.
    pub fn box_sum_into(&self, x1: usize, y1: usize, x2: usize, y2: usize, out: &mut [f64]) {
        debug_assert!(x1 <= x2 && x2 < self.width && y1 <= y2 && y2 < self.height);
        let a = self.corner(y2 + 1, x2 + 1);
        let b = self.corner(y1, x2 + 1);
        let c = self.corner(y2 + 1, x1);
        let d = self.corner(y1, x1);
        for i in 0..self.dim {
            out[i] = a[i] - b[i] - c[i] + d[i];
        }
    }

    pub fn box_sum(&self, x1: usize, y1: usize, x2: usize, y2: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.box_sum_into(x1, y1, x2, y2, &mut out);
        out
    }

    pub fn box_mean(&self, x1: usize, y1: usize, x2: usize, y2: usize) -> Vec<f64> {
        let area = ((x2 - x1 + 1) * (y2 - y1 + 1)) as f64;
        let mut out = self.box_sum(x1, y1, x2, y2);
        out.iter_mut().for_each(|v| *v /= area);
        out
    }
}

/// Summed-area table over the patch embeddings at `layer`.
pub fn build_sat(trace: &EmbeddingTrace, layer: usize) -> Result<SummedAreaTable> {
    check_layer(layer, trace.layers())?;
    Ok(SummedAreaTable::from_grid(
        trace.width(),
        trace.height(),
        trace.dim(),
        trace.patch_layer(layer),
    ))
}
