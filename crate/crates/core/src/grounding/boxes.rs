//! Exhaustive rectangle search: the box whose mean patch embedding is most
//! cosine-similar to the answer span embedding.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sat::{build_sat, SummedAreaTable};
use crate::error::{Error, Result};
use crate::scoring::{check_layer, cosine_from_parts, span_embedding, LayerChoice, TokenSpan};
use crate::trace::EmbeddingTrace;

/// Scores closer than this are treated as tied.
pub const SCORE_TIE_EPS: f64 = 1e-12;

/// Box edges in image pixels, `[x1, y1, x2, y2]` with `x2`, `y2` on the far
/// edge of the last covered patch. Pixel `(px, py)` is inside when its
/// centre `(px + 0.5, py + 0.5)` lies in `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PixelBox(pub [f64; 4]);

impl PixelBox {
    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        let [x1, y1, x2, y2] = self.0;
        cx >= x1 && cx < x2 && cy >= y1 && cy < y2
    }
}

/// A scored box in inclusive patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCandidate {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
    pub score: f64,
    pub pixel_box: PixelBox,
}

impl BoxCandidate {
    pub fn area(&self) -> usize {
        (self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)
    }

    pub fn coords(&self) -> (usize, usize, usize, usize) {
        (self.x1, self.y1, self.x2, self.y2)
    }

    /// Intersection over union of the covered patch sets.
    pub fn iou(&self, other: &BoxCandidate) -> f64 {
        let ix = overlap(self.x1, self.x2, other.x1, other.x2);
        let iy = overlap(self.y1, self.y2, other.y1, other.y2);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

fn overlap(a1: usize, a2: usize, b1: usize, b2: usize) -> usize {
    let lo = a1.max(b1);
    let hi = a2.min(b2);
    if hi >= lo {
        hi - lo + 1
    } else {
        0
    }
}

/// Scales patch coordinates to pixel edges for an `img_w x img_h` image.
pub fn pixel_box(
    (x1, y1, x2, y2): (usize, usize, usize, usize),
    grid: (usize, usize),
    image: (usize, usize),
) -> PixelBox {
    let sx = image.0 as f64 / grid.0 as f64;
    let sy = image.1 as f64 / grid.1 as f64;
    PixelBox([
        x1 as f64 * sx,
        y1 as f64 * sy,
        (x2 + 1) as f64 * sx,
        (y2 + 1) as f64 * sy,
    ])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxStrategy {
    /// Box sums from the summed-area table, `O(d)` per box.
    #[default]
    Sat,
    /// Direct summation over the patches of every box.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxSearchOptions {
    /// Layer for the answer embedding; defaults to the patch layer.
    pub answer_layer: Option<usize>,
    /// Boxes covering fewer patches are skipped.
    pub min_area: usize,
    pub strategy: BoxStrategy,
    /// Partition rows of `y1` across the rayon pool.
    pub parallel: bool,
}

impl Default for BoxSearchOptions {
    fn default() -> Self {
        Self {
            answer_layer: None,
            min_area: 1,
            strategy: BoxStrategy::Sat,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSearchOutput {
    pub best: BoxCandidate,
    /// Number of boxes whose score was evaluated.
    pub candidates_scored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    score: f64,
    key: (usize, usize, usize, usize),
}

impl Scored {
    fn area(&self) -> usize {
        let (y1, x1, y2, x2) = self.key;
        (x2 - x1 + 1) * (y2 - y1 + 1)
    }

    /// Higher score wins; within [`SCORE_TIE_EPS`] the larger box wins, then
    /// the lexicographically smallest `(y1, x1, y2, x2)`.
    fn beats(&self, other: &Scored) -> bool {
        if self.score > other.score + SCORE_TIE_EPS {
            return true;
        }
        if self.score < other.score - SCORE_TIE_EPS {
            return false;
        }
        match self.area().cmp(&other.area()) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.key < other.key,
        }
    }
}

fn keep_better(best: Option<Scored>, cand: Scored) -> Option<Scored> {
    match best {
        Some(b) if !cand.beats(&b) => Some(b),
        _ => Some(cand),
    }
}

/// Everything the per-row scan needs, independent of strategy.
struct Search<'a> {
    trace: &'a EmbeddingTrace,
    layer: usize,
    answer: Vec<f64>,
    answer_sq: f64,
    sat: Option<SummedAreaTable>,
    min_area: usize,
}

impl Search<'_> {
    /// Visits every box with top row `y1`, calling `f` with each score.
    fn scan_row(&self, y1: usize, mut f: impl FnMut(Scored)) {
        match &self.sat {
            Some(sat) => self.scan_row_sat(sat, y1, &mut f),
            None => self.scan_row_naive(y1, &mut f),
        }
    }

    fn scan_row_sat(&self, sat: &SummedAreaTable, y1: usize, f: &mut impl FnMut(Scored)) {
        let (w, h, d) = (sat.width(), sat.height(), sat.dim());
        let top = sat.corner_row(y1);
        // Column prefix sums of the strip y1..=y2, and their dot with the answer.
        let mut strip = vec![0.0f64; (w + 1) * d];
        let mut strip_dot = vec![0.0f64; w + 1];
        for y2 in y1..h {
            let bottom = sat.corner_row(y2 + 1);
            for x in 0..=w {
                let (s, b, t) = (
                    &mut strip[x * d..(x + 1) * d],
                    &bottom[x * d..(x + 1) * d],
                    &top[x * d..(x + 1) * d],
                );
                let mut dot = 0.0;
                for c in 0..d {
                    s[c] = b[c] - t[c];
                    dot += s[c] * self.answer[c];
                }
                strip_dot[x] = dot;
            }
            let rows = y2 - y1 + 1;
            for x1 in 0..w {
                let left = &strip[x1 * d..(x1 + 1) * d];
                for x2 in x1..w {
                    if rows * (x2 - x1 + 1) < self.min_area {
                        continue;
                    }
                    let right = &strip[(x2 + 1) * d..(x2 + 2) * d];
                    let mut sq = 0.0;
                    for c in 0..d {
                        let v = right[c] - left[c];
                        sq += v * v;
                    }
                    let dot = strip_dot[x2 + 1] - strip_dot[x1];
                    f(Scored {
                        score: cosine_from_parts(dot, self.answer_sq, sq),
                        key: (y1, x1, y2, x2),
                    });
                }
            }
        }
    }

    fn scan_row_naive(&self, y1: usize, f: &mut impl FnMut(Scored)) {
        let t = self.trace;
        let (w, h, d) = (t.width(), t.height(), t.dim());
        let mut sum = vec![0.0f64; d];
        for y2 in y1..h {
            for x1 in 0..w {
                for x2 in x1..w {
                    let area = (y2 - y1 + 1) * (x2 - x1 + 1);
                    if area < self.min_area {
                        continue;
                    }
                    sum.iter_mut().for_each(|v| *v = 0.0);
                    for y in y1..=y2 {
                        for x in x1..=x2 {
                            for (acc, &p) in sum.iter_mut().zip(t.patch(self.layer, y * w + x)) {
                                *acc += f64::from(p);
                            }
                        }
                    }
                    let inv = 1.0 / area as f64;
                    let (mut dot, mut sq) = (0.0, 0.0);
                    for (&s, &a) in sum.iter().zip(&self.answer) {
                        let m = s * inv;
                        dot += m * a;
                        sq += m * m;
                    }
                    f(Scored {
                        score: cosine_from_parts(dot, self.answer_sq, sq),
                        key: (y1, x1, y2, x2),
                    });
                }
            }
        }
    }

    fn candidate(&self, s: Scored) -> BoxCandidate {
        let (y1, x1, y2, x2) = s.key;
        let t = self.trace;
        BoxCandidate {
            x1,
            y1,
            x2,
            y2,
            score: s.score,
            pixel_box: pixel_box((x1, y1, x2, y2), (t.width(), t.height()), t.image_dims()),
        }
    }
}

fn prepare<'a>(
    trace: &'a EmbeddingTrace,
    span: TokenSpan,
    layer: usize,
    opts: &BoxSearchOptions,
) -> Result<Search<'a>> {
    check_layer(layer, trace.layers())?;
    let answer_layer = opts.answer_layer.unwrap_or(layer);
    let emb = span_embedding(trace, span, LayerChoice::Single(answer_layer))?;
    if opts.min_area == 0 || opts.min_area > trace.patches() {
        return Err(Error::InvalidArgument {
            field: "min_area",
            message: format!("must lie in 1..={}", trace.patches()),
        });
    }
    let answer = emb.vector().to_vec();
    let answer_sq = answer.iter().map(|a| a * a).sum();
    let sat = match opts.strategy {
        BoxStrategy::Sat => Some(build_sat(trace, layer)?),
        BoxStrategy::Naive => None,
    };
    Ok(Search {
        trace,
        layer,
        answer,
        answer_sq,
        sat,
        min_area: opts.min_area,
    })
}

/// Scores every box at patch layer `layer` and returns the best one together
/// with the number of boxes evaluated.
pub fn search_boxes(
    trace: &EmbeddingTrace,
    span: TokenSpan,
    layer: usize,
    opts: &BoxSearchOptions,
) -> Result<BoxSearchOutput> {
    let search = prepare(trace, span, layer, opts)?;
    let row_best = |y1: usize| {
        let mut best = None;
        let mut count = 0usize;
        search.scan_row(y1, |s| {
            count += 1;
            best = keep_better(best, s);
        });
        (best, count)
    };
    let rows: Vec<(Option<Scored>, usize)> = if opts.parallel {
        (0..trace.height()).into_par_iter().map(row_best).collect()
    } else {
        (0..trace.height()).map(row_best).collect()
    };
    // Fold in row order so the result does not depend on scheduling.
    let mut best = None;
    let mut candidates_scored = 0;
    for (b, count) in rows {
        candidates_scored += count;
        if let Some(b) = b {
            best = keep_better(best, b);
        }
    }
    let best = best.expect("min_area check guarantees at least one box");
    Ok(BoxSearchOutput {
        best: search.candidate(best),
        candidates_scored,
    })
}

/// The single best box `s*` at layer `layer`, answer taken at the same layer.
pub fn best_bbox(trace: &EmbeddingTrace, span: TokenSpan, layer: usize) -> Result<BoxCandidate> {
    Ok(search_boxes(trace, span, layer, &BoxSearchOptions::default())?.best)
}

/// Greedy non-maximum suppression over all boxes: up to `count` boxes in
/// descending score, dropping any whose IoU with a kept box exceeds
/// `iou_max`. The first element is always [`best_bbox`]'s result.
pub fn top_k_boxes(
    trace: &EmbeddingTrace,
    span: TokenSpan,
    layer: usize,
    count: usize,
    iou_max: f64,
    opts: &BoxSearchOptions,
) -> Result<Vec<BoxCandidate>> {
    if count == 0 {
        return Err(Error::InvalidArgument {
            field: "k",
            message: "must be >= 1".into(),
        });
    }
    if !(0.0..1.0).contains(&iou_max) {
        return Err(Error::InvalidArgument {
            field: "iou_max",
            message: "must lie in [0, 1)".into(),
        });
    }
    let best = search_boxes(trace, span, layer, opts)?.best;
    let search = prepare(trace, span, layer, opts)?;
    let mut all = Vec::new();
    for y1 in 0..trace.height() {
        search.scan_row(y1, |s| all.push(s));
    }
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| b.area().cmp(&a.area()))
            .then_with(|| a.key.cmp(&b.key))
    });
    let mut kept = vec![best];
    for s in all {
        if kept.len() == count {
            break;
        }
        let cand = search.candidate(s);
        if kept.iter().all(|k| k.iou(&cand) <= iou_max) {
            kept.push(cand);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::trace_from_fn;

    /// Patches inside `r` (inclusive) equal `u`, outside get a direction
    /// orthogonal to `u` that varies per patch.
    fn planted(w: usize, h: usize, r: (usize, usize, usize, usize)) -> EmbeddingTrace {
        let d = 6;
        trace_from_fn(
            1,
            d,
            w,
            h,
            2,
            move |_, j, c| {
                let (x, y) = (j % w, j / w);
                let inside = x >= r.0 && x <= r.2 && y >= r.1 && y <= r.3;
                if inside {
                    if c == 0 { 1.0 } else { 0.0 }
                } else if c == 1 + j % (d - 1) {
                    1.0 + (j % 3) as f32
                } else {
                    0.0
                }
            },
            |_, _, c| if c == 0 { 2.0 } else { 0.0 },
        )
    }

    #[test]
    fn single_patch_grid() {
        let t = trace_from_fn(1, 2, 1, 1, 1, |_, _, c| [3.0, 4.0][c], |_, _, c| [1.0, 0.0][c]);
        let out = search_boxes(&t, TokenSpan::full(1), 0, &BoxSearchOptions::default()).unwrap();
        assert_eq!(out.best.coords(), (0, 0, 0, 0));
        assert!((out.best.score - 0.6).abs() < 1e-12);
        assert_eq!(out.candidates_scored, 1);
        assert_eq!(out.best.pixel_box, PixelBox([0.0, 0.0, 4.0, 4.0]));
    }

    #[test]
    fn planted_rectangle_is_recovered() {
        let t = planted(6, 5, (1, 2, 3, 3));
        let b = best_bbox(&t, TokenSpan::full(2), 0).unwrap();
        assert_eq!(b.coords(), (1, 2, 3, 3));
        assert!((b.score - 1.0).abs() < 1e-12);
        assert_eq!(b.pixel_box, PixelBox([4.0, 8.0, 16.0, 16.0]));
    }

    #[test]
    fn enumeration_is_complete() {
        for (w, h) in [(1, 1), (3, 2), (5, 4), (7, 7)] {
            let t = planted(w, h, (0, 0, 0, 0));
            let out = search_boxes(&t, TokenSpan::full(2), 0, &BoxSearchOptions::default()).unwrap();
            assert_eq!(out.candidates_scored, w * (w + 1) / 2 * h * (h + 1) / 2);
        }
    }

    #[test]
    fn naive_and_parallel_agree_with_sat() {
        let t = trace_from_fn(2, 4, 5, 4, 2, |l, j, c| (((l * 31 + j * 7 + c * 13) % 11) as f32 - 5.0) * 0.3, |l, i, c| {
            ((l + i * 3 + c * 5) % 7) as f32 - 3.0
        });
        let span = TokenSpan::full(2);
        let sat = search_boxes(&t, span, 1, &BoxSearchOptions::default()).unwrap();
        for opts in [
            BoxSearchOptions { strategy: BoxStrategy::Naive, ..Default::default() },
            BoxSearchOptions { parallel: true, ..Default::default() },
        ] {
            let other = search_boxes(&t, span, 1, &opts).unwrap();
            assert_eq!(other.best.coords(), sat.best.coords());
            assert!((other.best.score - sat.best.score).abs() < 1e-9);
            assert_eq!(other.candidates_scored, sat.candidates_scored);
        }
    }

    #[test]
    fn min_area_filters_small_boxes() {
        let t = planted(4, 4, (1, 1, 1, 1));
        let opts = BoxSearchOptions { min_area: 4, ..Default::default() };
        let out = search_boxes(&t, TokenSpan::full(2), 0, &opts).unwrap();
        assert!(out.best.area() >= 4);
        assert!(out.best.x1 <= 1 && out.best.x2 >= 1 && out.best.y1 <= 1 && out.best.y2 >= 1);
        let too_big = BoxSearchOptions { min_area: 17, ..Default::default() };
        assert!(search_boxes(&t, TokenSpan::full(2), 0, &too_big).is_err());
    }

    #[test]
    fn layer_and_span_errors() {
        let t = planted(2, 2, (0, 0, 0, 0));
        assert!(matches!(best_bbox(&t, TokenSpan::full(2), 1), Err(Error::LayerOutOfRange { .. })));
        assert!(matches!(best_bbox(&t, TokenSpan::new(0, 3), 0), Err(Error::SpanOutOfRange { .. })));
    }

    #[test]
    fn iou_of_boxes() {
        let b = |x1, y1, x2, y2| BoxCandidate { x1, y1, x2, y2, score: 0.0, pixel_box: PixelBox([0.0; 4]) };
        assert_eq!(b(0, 0, 1, 1).iou(&b(0, 0, 1, 1)), 1.0);
        assert_eq!(b(0, 0, 1, 1).iou(&b(2, 2, 3, 3)), 0.0);
        assert!((b(0, 0, 1, 0).iou(&b(1, 0, 2, 0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn top_k_first_is_best_and_respects_iou() {
        let t = planted(5, 5, (1, 1, 2, 3));
        let span = TokenSpan::full(2);
        let best = best_bbox(&t, span, 0).unwrap();
        let one = top_k_boxes(&t, span, 0, 1, 0.5, &BoxSearchOptions::default()).unwrap();
        assert_eq!(one, vec![best]);
        let many = top_k_boxes(&t, span, 0, 8, 0.3, &BoxSearchOptions::default()).unwrap();
        assert_eq!(many[0], best);
        for (i, a) in many.iter().enumerate() {
            for b in &many[i + 1..] {
                assert!(a.iou(b) <= 0.3);
            }
        }
        assert!(many.windows(2).skip(1).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn top_k_shorter_when_candidates_run_out() {
        let t = planted(2, 1, (0, 0, 0, 0));
        let out = top_k_boxes(&t, TokenSpan::full(2), 0, 10, 0.0, &BoxSearchOptions::default()).unwrap();
        // Three boxes exist; the full-width one overlaps both singletons.
        assert_eq!(out.len(), 2);
    }
}
