use std::collections::BTreeMap;

use crate::trace::{EmbeddingTrace, TraceMetadata, TraceParts};

pub(crate) fn metadata(tokens: usize, img_w: u32, img_h: u32) -> TraceMetadata {
    TraceMetadata {
        question: "q".into(),
        answer_text: "a".into(),
        answer_token_strings: (0..tokens).map(|i| format!("t{i}")).collect(),
        category: "other".into(),
        image_ref: None,
        original_image_width: img_w,
        original_image_height: img_h,
        extra: BTreeMap::new(),
    }
}

/// Builds a trace whose patch value at (layer, patch, channel) and answer
/// value at (layer, token, channel) come from closures.
pub(crate) fn trace_from_fn(
    layers: usize,
    dim: usize,
    width: usize,
    height: usize,
    tokens: usize,
    patch: impl Fn(usize, usize, usize) -> f32,
    answer: impl Fn(usize, usize, usize) -> f32,
) -> EmbeddingTrace {
    let n = width * height;
    let mut patch_embeddings = Vec::with_capacity(layers * n * dim);
    for l in 0..layers {
        for j in 0..n {
            for c in 0..dim {
                patch_embeddings.push(patch(l, j, c));
            }
        }
    }
    let mut answer_embeddings = Vec::with_capacity(layers * tokens * dim);
    for l in 0..layers {
        for i in 0..tokens {
            for c in 0..dim {
                answer_embeddings.push(answer(l, i, c));
            }
        }
    }
    EmbeddingTrace::new(TraceParts {
        layers,
        dim,
        width,
        height,
        tokens,
        patch_embeddings,
        answer_embeddings,
        answer_token_ids: None,
        output_probs: None,
        unembedding: None,
        gt_mask: None,
        label: None,
        metadata: metadata(tokens, 4 * width as u32, 4 * height as u32),
    })
    .expect("valid test trace")
}
