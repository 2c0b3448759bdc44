#![allow(dead_code)]

use std::collections::BTreeMap;

use lensground::{EmbeddingTrace, TraceMetadata, TraceParts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn metadata(tokens: usize, img_w: u32, img_h: u32) -> TraceMetadata {
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

pub fn parts(layers: usize, dim: usize, width: usize, height: usize, tokens: usize, rng: &mut impl Rng) -> TraceParts {
    let n = width * height;
    let gauss = |rng: &mut dyn rand::RngCore| -> f32 { rng.sample::<f32, _>(rand_distr::StandardNormal) };
    TraceParts {
        layers,
        dim,
        width,
        height,
        tokens,
        patch_embeddings: (0..layers * n * dim).map(|_| gauss(rng)).collect(),
        answer_embeddings: (0..layers * tokens * dim).map(|_| gauss(rng)).collect(),
        answer_token_ids: None,
        output_probs: None,
        unembedding: None,
        gt_mask: None,
        label: None,
        metadata: metadata(tokens, 4 * width as u32, 4 * height as u32),
    }
}

/// Gaussian trace with every embedding drawn from `seed`.
pub fn random_trace(seed: u64, layers: usize, dim: usize, width: usize, height: usize, tokens: usize) -> EmbeddingTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingTrace::new(parts(layers, dim, width, height, tokens, &mut rng)).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine from scratch, zero when either norm is zero.
pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Mean of the span's answer rows at `layer`.
pub fn naive_span(trace: &EmbeddingTrace, start: usize, end: usize, layer: usize) -> Vec<f64> {
    let d = trace.dim();
    let mut acc = vec![0.0; d];
    for i in start..end {
        for (a, &x) in acc.iter_mut().zip(trace.answer(layer, i)) {
            *a += f64::from(x);
        }
    }
    acc.iter().map(|a| a / (end - start) as f64).collect()
}

/// Exhaustive box search straight from the definition: mean of the
/// patches, cosine with the span. Returns ((x1, y1, x2, y2), score) with the
/// same tie rule as the engine.
pub fn brute_force_box(trace: &EmbeddingTrace, layer: usize) -> ((usize, usize, usize, usize), f64) {
    let (w, h, d) = (trace.width(), trace.height(), trace.dim());
    let answer = naive_span(trace, 0, trace.tokens(), layer);
    let mut best: Option<((usize, usize, usize, usize), f64)> = None;
    for y1 in 0..h {
        for x1 in 0..w {
            for y2 in y1..h {
                for x2 in x1..w {
                    let mut mean = vec![0.0; d];
                    for y in y1..=y2 {
                        for x in x1..=x2 {
                            for (m, &v) in mean.iter_mut().zip(trace.patch(layer, y * w + x)) {
                                *m += f64::from(v);
                            }
                        }
                    }
                    let area = ((x2 - x1 + 1) * (y2 - y1 + 1)) as f64;
                    mean.iter_mut().for_each(|m| *m /= area);
                    let s = naive_cosine(&mean, &answer);
                    let c = (x1, y1, x2, y2);
                    let better = match best {
                        None => true,
                        Some((bc, bs)) => {
                            let barea = (bc.2 - bc.0 + 1) * (bc.3 - bc.1 + 1);
                            if s > bs + 1e-12 {
                                true
                            } else if s >= bs - 1e-12 {
                                let a = (x2 - x1 + 1) * (y2 - y1 + 1);
                                a > barea || (a == barea && (y1, x1, y2, x2) < (bc.1, bc.0, bc.3, bc.2))
                            } else {
                                false
                            }
                        }
                    };
                    if better {
                        best = Some((c, s));
                    }
                }
            }
        }
    }
    best.unwrap()
}
