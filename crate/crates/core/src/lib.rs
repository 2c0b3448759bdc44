//! Hallucination detection and visual grounding from the contextual
//! embeddings of a vision-language model, computed over recorded traces.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
    }};
}

pub mod baselines;
pub mod error;
pub mod eval;
pub mod export;
pub mod grounding;
pub mod layers;
pub mod manifest;
pub mod scoring;
pub mod synth;
pub mod trace;

#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
pub use manifest::{load_manifest, Category, DatasetManifest, ManifestEntry, Split};
pub use scoring::{DetectLayers, LayerChoice, PatchScoreMap, SpanEmbedding, TokenSpan};
pub use trace::{read_trace, write_trace, EmbeddingTrace, Mask, TraceFlags, TraceMetadata, TraceParts};
