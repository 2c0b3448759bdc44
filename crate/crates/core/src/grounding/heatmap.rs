use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{cosine_unchecked, span_embedding, LayerChoice, TokenSpan};
use crate::trace::EmbeddingTrace;

/// Interpolation used when resizing a patch grid to image pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Layer-max grounding map for one answer span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGround {
    pub width: usize,
    pub height: usize,
    /// Per-patch maximum cosine over layers, row-major `[H][W]`.
    pub grid: Vec<f64>,
    /// Layer attaining the maximum (lowest index on ties).
    pub layer_argmax: Vec<usize>,
    pub img_w: usize,
    pub img_h: usize,
    /// `grid` resampled to `[img_h][img_w]`.
    pub resized: Vec<f64>,
}

pub fn layerwise_final_scores(trace: &EmbeddingTrace, span: TokenSpan) -> Result<HeatmapGround> {
    layerwise_final_scores_with(trace, span, ResizeMode::default())
}

pub fn layerwise_final_scores_with(
    trace: &EmbeddingTrace,
    span: TokenSpan,
    mode: ResizeMode,
) -> Result<HeatmapGround> {
    let answers = span_embedding(trace, span, LayerChoice::All)?;
    let n = trace.patches();
    let mut grid = vec![f64::NEG_INFINITY; n];
    let mut layer_argmax = vec![0usize; n];
    for l in 0..trace.layers() {
        let a = answers.row(l);
        for (j, p) in trace.patch_layer(l).chunks_exact(trace.dim()).enumerate() {
            let s = cosine_unchecked(a, p);
            if s > grid[j] {
                grid[j] = s;
                layer_argmax[j] = l;
            }
        }
    }
    let (img_w, img_h) = trace.image_dims();
    let resized = resize_map(&grid, trace.width(), trace.height(), img_w, img_h, mode)?;
    Ok(HeatmapGround {
        width: trace.width(),
        height: trace.height(),
        grid,
        layer_argmax,
        img_w,
        img_h,
        resized,
    })
}

/// Resamples a row-major `[h][w]` grid to `[img_h][img_w]`.
///
/// Patch `(x, y)` is centred at `((x + 0.5) * img_w / w, (y + 0.5) * img_h / h)`;
/// samples beyond the outermost centres clamp to the edge values.
pub fn resize_map(
    grid: &[f64],
    w: usize,
    h: usize,
    img_w: usize,
    img_h: usize,
    mode: ResizeMode,
) -> Result<Vec<f64>> {
    if img_w == 0 || img_h == 0 {
        return Err(Error::InvalidArgument {
            field: "image_dims",
            message: "target dims must be >= 1".into(),
        });
    }
    if w == 0 || h == 0 || grid.len() != w * h {
        return Err(Error::InvalidArgument {
            field: "grid",
            message: format!("grid of {} values is not {w}x{h}", grid.len()),
        });
    }
    let xs = axis_samples(w, img_w, mode);
    let ys = axis_samples(h, img_h, mode);
    let mut out = Vec::with_capacity(img_w * img_h);
    for &(y0, y1, ty) in &ys {
        let (r0, r1) = (&grid[y0 * w..(y0 + 1) * w], &grid[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, tx) in &xs {
            let top = lerp(r0[x0], r0[x1], tx);
            let bottom = lerp(r1[x0], r1[x1], tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    Ok(out)
}

/// For every output pixel along one axis: the two source cells and the
/// weight of the second.
fn axis_samples(cells: usize, pixels: usize, mode: ResizeMode) -> Vec<(usize, usize, f64)> {
    let scale = cells as f64 / pixels as f64;
    (0..pixels)
        .map(|p| {
            let centre = (p as f64 + 0.5) * scale;
            match mode {
                ResizeMode::Nearest => {
                    let c = (centre.floor() as usize).min(cells - 1);
                    (c, c, 0.0)
                }
                ResizeMode::Bilinear => {
                    let g = (centre - 0.5).clamp(0.0, (cells - 1) as f64);
                    let c0 = g.floor() as usize;
                    let c1 = (c0 + 1).min(cells - 1);
                    (c0, c1, g - c0 as f64)
                }
            }
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{contextual_lens, DetectLayers};
    use crate::test_support::trace_from_fn;

    #[test]
    fn constant_grid_stays_constant() {
        let out = resize_map(&[0.3; 6], 3, 2, 7, 5, ResizeMode::Bilinear).unwrap();
        assert_eq!(out.len(), 35);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn single_cell_fills_target() {
        for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
            let out = resize_map(&[-0.25], 1, 1, 9, 4, mode).unwrap();
            assert!(out.iter().all(|&v| v == -0.25));
        }
    }

    #[test]
    fn two_by_two_rows_are_monotone() {
        let out = resize_map(&[0.0, 1.0, 0.0, 1.0], 2, 2, 4, 4, ResizeMode::Bilinear).unwrap();
        for row in out.chunks(4) {
            assert!(row.windows(2).all(|w| w[0] <= w[1]), "{row:?}");
        }
        // Centres of the 4 px output map to grid coords -0.25, 0.25, 0.75, 1.25.
        assert_eq!(&out[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn output_within_grid_range() {
        let grid = [0.1, -0.4, 0.9, 0.3, 0.0, 0.5];
        let out = resize_map(&grid, 3, 2, 11, 13, ResizeMode::Bilinear).unwrap();
        assert!(out.iter().all(|&v| (-0.4..=0.9).contains(&v)));
    }

    #[test]
    fn nearest_replicates_blocks() {
        let out = resize_map(&[1.0, 2.0], 2, 1, 4, 1, ResizeMode::Nearest).unwrap();
        assert_eq!(out, [1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(resize_map(&[1.0], 1, 1, 0, 3, ResizeMode::Bilinear).is_err());
    }

    #[test]
    fn single_layer_matches_patch_scores() {
        let t = trace_from_fn(1, 3, 3, 2, 2, |_, j, c| ((j * 5 + c * 3) % 7) as f32 - 3.0, |_, i, c| {
            (i + c) as f32 - 1.0
        });
        let span = TokenSpan::full(2);
        let g = layerwise_final_scores(&t, span).unwrap();
        let m = contextual_lens(&t, span, DetectLayers::middle(1)).unwrap();
        assert_eq!(g.grid, m.scores);
        assert!(g.layer_argmax.iter().all(|&l| l == 0));
        assert_eq!(g.resized.len(), 12 * 8);
    }

    #[test]
    fn duplicated_layer_ties_to_lowest() {
        let p = |_: usize, j: usize, c: usize| ((j * 3 + c) % 5) as f32 - 2.0;
        let a = |_: usize, _: usize, c: usize| c as f32 + 0.5;
        let one = trace_from_fn(1, 3, 2, 2, 1, p, a);
        let two = trace_from_fn(2, 3, 2, 2, 1, p, a);
        let g1 = layerwise_final_scores(&one, TokenSpan::full(1)).unwrap();
        let g2 = layerwise_final_scores(&two, TokenSpan::full(1)).unwrap();
        assert_eq!(g1.grid, g2.grid);
        assert!(g2.layer_argmax.iter().all(|&l| l == 0));
    }
}
