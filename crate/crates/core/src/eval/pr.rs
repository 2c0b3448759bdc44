use serde::{Deserialize, Serialize};

use crate::baselines::{logit_lens_patch_probe, logit_lens_segmentation};
use crate::error::{Error, Result};
use crate::grounding::{
    layerwise_final_scores_with, search_boxes, BoxSearchOptions, PixelBox, ResizeMode,
};
use crate::manifest::{DatasetManifest, Split};
use crate::scoring::TokenSpan;
use crate::trace::Mask;

use super::detection::load_split;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positive: u64,
    pub predicted: u64,
    pub foreground: u64,
}

/// Points ordered by ascending threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub method_tag: String,
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// `threshold,precision,recall` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
        }
        out
    }
}

/// Precision/recall of one predicted pixel set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrPoint {
    pub precision: f64,
    pub recall: f64,
    pub true_positive: u64,
    pub predicted: u64,
    pub foreground: u64,
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

fn point(threshold: f64, tp: u64, predicted: u64, foreground: u64) -> PrPoint {
    PrPoint {
        threshold,
        precision: ratio(tp, predicted, 1.0),
        recall: ratio(tp, foreground, 0.0),
        true_positive: tp,
        predicted,
        foreground,
    }
}

/// `-inf`, `steps` evenly spaced values over `[min, max]`, `+inf`.
pub fn threshold_grid(min: f64, max: f64, steps: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY];
    match steps {
        0 => {}
        1 => out.push(min),
        _ => out.extend((0..steps).map(|i| min + (max - min) * i as f64 / (steps - 1) as f64)),
    }
    out.push(f64::INFINITY);
    out
}

fn sorted_thresholds(thresholds: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = thresholds.iter().copied().filter(|v| !v.is_nan()).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Counts `(true_positive, predicted)` at each threshold (`value >= t`).
fn threshold_counts(heatmap: &[f64], mask: &Mask, thresholds: &[f64]) -> Vec<(u64, u64)> {
    let mut values: Vec<(f64, bool)> = heatmap
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| (v, m != 0))
        .collect();
    values.sort_by(|a, b| b.0.total_cmp(&a.0));
    // fg_prefix[i] = foreground count among the i highest values.
    let mut fg_prefix = Vec::with_capacity(values.len() + 1);
    fg_prefix.push(0u64);
    for &(_, fg) in &values {
        fg_prefix.push(fg_prefix.last().unwrap() + u64::from(fg));
    }
    thresholds
        .iter()
        .map(|&t| {
            let predicted = values.partition_point(|&(v, _)| v >= t);
            (fg_prefix[predicted], predicted as u64)
        })
        .collect()
}

fn check_dims(heatmap: &[f64], width: usize, height: usize, mask: &Mask) -> Result<()> {
    if width != mask.width || height != mask.height || heatmap.len() != width * height {
        return Err(Error::DimMismatch {
            heatmap_w: width,
            heatmap_h: height,
            mask_w: mask.width,
            mask_h: mask.height,
        });
    }
    Ok(())
}

/// PR curve of a single `[height][width]` heatmap against a mask. A pixel is
/// predicted at threshold `t` when its value is `>= t`.
pub fn pr_curve(
    heatmap: &[f64],
    width: usize,
    height: usize,
    mask: &Mask,
    thresholds: &[f64],
    method_tag: &str,
) -> Result<PrCurve> {
    let mut acc = PrAccumulator::new(thresholds);
    acc.add(heatmap, width, height, mask)?;
    Ok(acc.finish(Averaging::Micro, method_tag))
}

pub fn bbox_pr_point(pixel_box: &PixelBox, mask: &Mask) -> Result<BoxPrPoint> {
    let [x1, y1, x2, y2] = pixel_box.0;
    let (w, h) = (mask.width as f64, mask.height as f64);
    if !(0.0 <= x1 && x1 <= x2 && x2 <= w && 0.0 <= y1 && y1 <= y2 && y2 <= h) {
        return Err(Error::InvalidArgument {
            field: "pixel_box",
            message: format!("{:?} outside {}x{} image", pixel_box.0, mask.width, mask.height),
        });
    }
    let foreground = mask.foreground_count() as u64;
    if foreground == 0 {
        return Err(Error::EmptyForeground);
    }
    let (mut tp, mut predicted) = (0u64, 0u64);
    for py in 0..mask.height {
        for px in 0..mask.width {
            if pixel_box.contains_pixel(px, py) {
                predicted += 1;
                tp += u64::from(mask.is_foreground(px, py));
            }
        }
    }
    Ok(BoxPrPoint {
        precision: ratio(tp, predicted, 1.0),
        recall: ratio(tp, foreground, 0.0),
        true_positive: tp,
        predicted,
        foreground,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Pool pixel counts over images before dividing.
    #[default]
    Micro,
    /// Average per-image precision and recall.
    Macro,
}

/// Accumulates per-threshold pixel counts over many images.
#[derive(Debug, Clone)]
pub struct PrAccumulator {
    thresholds: Vec<f64>,
    tp: Vec<u64>,
    predicted: Vec<u64>,
    foreground: u64,
    precision_sum: Vec<f64>,
    recall_sum: Vec<f64>,
    images: usize,
}

impl PrAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        let thresholds = sorted_thresholds(thresholds);
        let n = thresholds.len();
        Self {
            thresholds,
            tp: vec![0; n],
            predicted: vec![0; n],
            foreground: 0,
            precision_sum: vec![0.0; n],
            recall_sum: vec![0.0; n],
            images: 0,
        }
    }

    pub fn add(&mut self, heatmap: &[f64], width: usize, height: usize, mask: &Mask) -> Result<()> {
        check_dims(heatmap, width, height, mask)?;
        let fg = mask.foreground_count() as u64;
        if fg == 0 {
            return Err(Error::EmptyForeground);
        }
        let counts = threshold_counts(heatmap, mask, &self.thresholds);
        for (i, (tp, pred)) in counts.into_iter().enumerate() {
            self.tp[i] += tp;
            self.predicted[i] += pred;
            self.precision_sum[i] += ratio(tp, pred, 1.0);
            self.recall_sum[i] += ratio(tp, fg, 0.0);
        }
        self.foreground += fg;
        self.images += 1;
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn finish(&self, averaging: Averaging, method_tag: &str) -> PrCurve {
        let points = (0..self.thresholds.len())
            .map(|i| {
                let mut p = point(self.thresholds[i], self.tp[i], self.predicted[i], self.foreground);
                if averaging == Averaging::Macro && self.images > 0 {
                    p.precision = self.precision_sum[i] / self.images as f64;
                    p.recall = self.recall_sum[i] / self.images as f64;
                }
                p
            })
            .collect();
        PrCurve {
            method_tag: method_tag.to_owned(),
            points,
        }
    }
}

/// How the grounding map is produced for dataset evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundingMode {
    /// Layer-max contextual heatmap, thresholded into a PR curve.
    Heatmap,
    /// Best box, one PR point per image plus a pooled point.
    Bbox,
    /// Logit-lens confidence heatmap baseline.
    Ll,
}

impl GroundingMode {
    pub fn tag(self) -> &'static str {
        match self {
            GroundingMode::Heatmap => "cl-heatmap",
            GroundingMode::Bbox => "cl-bbox",
            GroundingMode::Ll => "ll-heatmap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingOptions {
    pub split: Split,
    pub averaging: Averaging,
    pub resize: ResizeMode,
    /// Box layer; `None` takes each trace's middle layer.
    pub box_layer: Option<usize>,
    /// Interior points of the threshold grid.
    pub threshold_steps: usize,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            averaging: Averaging::Micro,
            resize: ResizeMode::Bilinear,
            box_layer: None,
            threshold_steps: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub method_tag: String,
    pub images: usize,
    pub curve: Option<PrCurve>,
    /// One point per image (bbox mode).
    pub bbox_points: Vec<BoxPrPoint>,
    /// Pixel counts pooled over images (bbox mode).
    pub pooled_bbox_point: Option<BoxPrPoint>,
    pub notes: Vec<String>,
}

/// Evaluates grounding over every trace in the split that carries a mask.
pub fn evaluate_grounding(
    manifest: &DatasetManifest,
    mode: GroundingMode,
    opts: &GroundingOptions,
) -> Result<GroundingReport> {
    let entries = load_split(manifest, opts.split)?;
    let mut notes = Vec::new();
    let mut masked = Vec::new();
    for e in &entries {
        match e.trace.gt_mask() {
            Some(m) if m.foreground_count() > 0 => masked.push(e),
            Some(_) => notes.push(format!("{}: empty foreground, skipped", e.trace_id)),
            None => notes.push(format!("{}: no mask, skipped", e.trace_id)),
        }
    }
    let mut report = GroundingReport {
        method_tag: mode.tag().to_owned(),
        images: masked.len(),
        curve: None,
        bbox_points: Vec::new(),
        pooled_bbox_point: None,
        notes,
    };
    match mode {
        GroundingMode::Bbox => {
            let (mut tp, mut pred, mut fg) = (0, 0, 0);
            for e in &masked {
                let t = &e.trace;
                let layer = opts.box_layer.unwrap_or(t.layers() / 2);
                let best = search_boxes(t, TokenSpan::full(t.tokens()), layer, &BoxSearchOptions::default())?.best;
                let p = bbox_pr_point(&best.pixel_box, t.gt_mask().unwrap())?;
                tp += p.true_positive;
                pred += p.predicted;
                fg += p.foreground;
                report.bbox_points.push(p);
            }
            if !masked.is_empty() {
                report.pooled_bbox_point = Some(BoxPrPoint {
                    precision: ratio(tp, pred, 1.0),
                    recall: ratio(tp, fg, 0.0),
                    true_positive: tp,
                    predicted: pred,
                    foreground: fg,
                });
            }
        }
        GroundingMode::Heatmap | GroundingMode::Ll => {
            let mut maps = Vec::with_capacity(masked.len());
            for e in &masked {
                let t = &e.trace;
                let span = TokenSpan::full(t.tokens());
                let (img_w, img_h) = t.image_dims();
                let resized = match mode {
                    GroundingMode::Heatmap => layerwise_final_scores_with(t, span, opts.resize)?.resized,
                    _ => logit_lens_segmentation(&logit_lens_patch_probe(t, span)?, img_w, img_h, opts.resize)?,
                };
                maps.push((resized, img_w, img_h, t.gt_mask().unwrap()));
            }
            let (lo, hi) = maps
                .iter()
                .flat_map(|m| m.0.iter().copied())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if !maps.is_empty() {
                let mut acc = PrAccumulator::new(&threshold_grid(lo, hi, opts.threshold_steps));
                for (map, w, h, mask) in &maps {
                    acc.add(map, *w, *h, mask)?;
                }
                report.curve = Some(acc.finish(opts.averaging, mode.tag()));
            }
        }
    }
    Ok(report)
}
