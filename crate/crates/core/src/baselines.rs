//! Comparison detectors: the logit-lens patch probe and raw output
//! probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{resize_map, ResizeMode};
use crate::scoring::TokenSpan;
use crate::trace::EmbeddingTrace;

/// Per-token, per-patch probability of the answer token under the logit
/// lens, maximised over layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalConfidenceMap {
    pub width: usize,
    pub height: usize,
    pub span: TokenSpan,
    /// `[span.len()][n]`.
    pub per_token: Vec<Vec<f64>>,
    /// Mean of `per_token` over tokens, `[n]`.
    pub mean_map: Vec<f64>,
}

/// How multi-token answers are reduced to a single detection value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenAggregation {
    /// Mean over tokens per patch, then max over patches.
    #[default]
    MeanThenMax,
    /// Max over patches per token, then mean over tokens.
    MaxThenMean,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn logit_lens_patch_probe(
    trace: &EmbeddingTrace,
    span: TokenSpan,
) -> Result<InternalConfidenceMap> {
    let unembedding = trace.unembedding().ok_or(Error::MissingUnembedding)?;
    let ids = trace.answer_token_ids().ok_or(Error::MissingTokenIds)?;
    span.check(trace.tokens())?;
    let (d, n, vocab) = (trace.dim(), trace.patches(), trace.vocab());
    let ids = &ids[span.start..span.end];
    let mut per_token = vec![vec![0.0f64; n]; ids.len()];
    let mut logits = vec![0.0f64; vocab];
    for l in 0..trace.layers() {
        for (j, p) in trace.patch_layer(l).chunks_exact(d).enumerate() {
            for (z, row) in logits.iter_mut().zip(unembedding.chunks_exact(d)) {
                *z = row
                    .iter()
                    .zip(p)
                    .map(|(&u, &x)| f64::from(u) * f64::from(x))
                    .sum();
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for (row, &id) in per_token.iter_mut().zip(ids) {
                let prob = (logits[id as usize] - lse).exp();
                if prob > row[j] {
                    row[j] = prob;
                }
            }
        }
    }
    let inv = 1.0 / ids.len() as f64;
    let mean_map = (0..n)
        .map(|j| per_token.iter().map(|row| row[j]).sum::<f64>() * inv)
        .collect();
    Ok(InternalConfidenceMap {
        width: trace.width(),
        height: trace.height(),
        span,
        per_token,
        mean_map,
    })
}

pub fn logit_lens_detection(map: &InternalConfidenceMap) -> Result<f64> {
    logit_lens_detection_with(map, TokenAggregation::default())
}

pub fn logit_lens_detection_with(
    map: &InternalConfidenceMap,
    aggregation: TokenAggregation,
) -> Result<f64> {
    if map.mean_map.is_empty() || map.per_token.is_empty() {
        return Err(Error::EmptyMap);
    }
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(match aggregation {
        TokenAggregation::MeanThenMax => max(&map.mean_map),
        TokenAggregation::MaxThenMean => {
            map.per_token.iter().map(|row| max(row)).sum::<f64>() / map.per_token.len() as f64
        }
    })
}

/// Token-mean confidence resized to image pixels.
pub fn logit_lens_segmentation(
    map: &InternalConfidenceMap,
    img_w: usize,
    img_h: usize,
    mode: ResizeMode,
) -> Result<Vec<f64>> {
    resize_map(&map.mean_map, map.width, map.height, img_w, img_h, mode)
}

/// Highest generation probability among the span's tokens.
pub fn output_probs_detection(trace: &EmbeddingTrace, span: TokenSpan) -> Result<f64> {
    let probs = trace.output_probs().ok_or(Error::MissingOutputProbs)?;
    span.check(trace.tokens())?;
    Ok(probs[span.start..span.end]
        .iter()
        .map(|&p| f64::from(p))
        .fold(f64::NEG_INFINITY, f64::max))
}
