//! Span-averaged answer embeddings, cosine scoring of image patches, and the
//! max-patch detection confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::EmbeddingTrace;

/// Half-open range of answer-token indices `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// The whole answer, `[0, k)`.
    pub fn full(tokens: usize) -> Self {
        Self {
            start: 0,
            end: tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn check(&self, tokens: usize) -> Result<()> {
        if self.is_empty() || self.end > tokens {
            return Err(Error::SpanOutOfRange {
                start: self.start,
                end: self.end,
                tokens,
            });
        }
        Ok(())
    }
}

/// Which layer(s) a span embedding is taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerChoice {
    Single(usize),
    All,
}

/// Mean of the answer-token embeddings over a span, stored in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanEmbedding {
    pub layer: LayerChoice,
    pub span: TokenSpan,
    dim: usize,
    /// One row per requested layer, `[rows][d]` flattened.
    rows: Vec<f64>,
}

impl SpanEmbedding {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.rows.len() / self.dim
    }

    /// The vector of a single-layer embedding, or layer 0's row for `All`.
    pub fn vector(&self) -> &[f64] {
        &self.rows[..self.dim]
    }

    /// Row for trace layer `layer` (only meaningful for `All`).
    pub fn row(&self, layer: usize) -> &[f64] {
        &self.rows[layer * self.dim..(layer + 1) * self.dim]
    }

    /// Rescales in place; used by invariance checks.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.rows.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

/// Per-patch cosine scores on the `W x H` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScoreMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
    pub layer_text: usize,
    pub layer_image: usize,
}

impl PatchScoreMap {
    /// Index of the best-scoring patch (lowest index on ties).
    pub fn argmax(&self) -> Option<usize> {
        argmax_first(&self.scores)
    }
}

/// Text and image layers used by the detector. Orders lexicographically by
/// `(image, text)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DetectLayers {
    #[serde(rename = "l_I")]
    pub image: usize,
    #[serde(rename = "l_T")]
    pub text: usize,
}

impl DetectLayers {
    /// Middle layer for both sides.
    pub fn middle(layers: usize) -> Self {
        Self {
            image: layers / 2,
            text: layers / 2,
        }
    }
}

/// Lossless widening to f64 for mixed-precision dot products.
pub trait Real: Copy {
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// `u.v / (|u| |v|)`, accumulated in f64. Zero when either norm is zero.
pub fn cosine<A: Real, B: Real>(u: &[A], v: &[B]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    Ok(cosine_unchecked(u, v))
}

#[inline]
pub(crate) fn cosine_unchecked<A: Real, B: Real>(u: &[A], v: &[B]) -> f64 {
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.to_f64(), b.to_f64());
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    cosine_from_parts(dot, uu, vv)
}

#[inline]
pub(crate) fn cosine_from_parts(dot: f64, uu: f64, vv: f64) -> f64 {
    if uu == 0.0 || vv == 0.0 {
        0.0
    } else {
        dot / (uu.sqrt() * vv.sqrt())
    }
}

pub(crate) fn check_layer(layer: usize, layers: usize) -> Result<()> {
    if layer >= layers {
        return Err(Error::LayerOutOfRange { layer, layers });
    }
    Ok(())
}

pub(crate) fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mean answer-token embedding over `span` at one layer or at every layer.
pub fn span_embedding(
    trace: &EmbeddingTrace,
    span: TokenSpan,
    layer: LayerChoice,
) -> Result<SpanEmbedding> {
    span.check(trace.tokens())?;
    let layers: Vec<usize> = match layer {
        LayerChoice::Single(l) => {
            check_layer(l, trace.layers())?;
            vec![l]
        }
        LayerChoice::All => (0..trace.layers()).collect(),
    };
    let d = trace.dim();
    let inv = 1.0 / span.len() as f64;
    let mut rows = vec![0.0f64; layers.len() * d];
    for (r, &l) in layers.iter().enumerate() {
        let row = &mut rows[r * d..(r + 1) * d];
        for t in span.start..span.end {
            for (acc, &x) in row.iter_mut().zip(trace.answer(l, t)) {
                *acc += f64::from(x);
            }
        }
        if span.len() > 1 {
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(SpanEmbedding {
        layer,
        span,
        dim: d,
        rows,
    })
}

/// Cosine of a single-layer span embedding against every patch at
/// `layer_image`.
pub fn patch_scores(
    trace: &EmbeddingTrace,
    span_emb: &SpanEmbedding,
    layer_image: usize,
) -> Result<PatchScoreMap> {
    let layer_text = match span_emb.layer {
        LayerChoice::Single(l) => l,
        LayerChoice::All => {
            return Err(Error::InvalidArgument {
                field: "span_emb",
                message: "patch scoring needs a single-layer span embedding".into(),
            })
        }
    };
    check_layer(layer_image, trace.layers())?;
    if span_emb.dim() != trace.dim() {
        return Err(Error::DimensionMismatch {
            left: span_emb.dim(),
            right: trace.dim(),
        });
    }
    let answer = span_emb.vector();
    let scores = trace
        .patch_layer(layer_image)
        .chunks_exact(trace.dim())
        .map(|p| cosine_unchecked(answer, p))
        .collect();
    Ok(PatchScoreMap {
        width: trace.width(),
        height: trace.height(),
        scores,
        layer_text,
        layer_image,
    })
}

/// Highest patch score. High values mean the answer is visually supported.
pub fn detection_confidence(map: &PatchScoreMap) -> Result<f64> {
    map.scores
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::EmptyMap)
}

/// Span embedding at `layers.text`, scored against patches at `layers.image`.
pub fn contextual_lens(
    trace: &EmbeddingTrace,
    span: TokenSpan,
    layers: DetectLayers,
) -> Result<PatchScoreMap> {
    check_layer(layers.image, trace.layers())?;
    let emb = span_embedding(trace, span, LayerChoice::Single(layers.text))?;
    patch_scores(trace, &emb, layers.image)
}
