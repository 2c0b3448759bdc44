//! Synthetic traces with a planted answer direction and known support
//! region.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::pixel_box;
use crate::manifest::{Category, DatasetManifest, ManifestEntry, Split};
use crate::trace::{write_trace, EmbeddingTrace, Mask, TraceMetadata, TraceParts};

pub const DEFAULT_SIGNAL: f64 = 1.0;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
/// Image pixels per patch when no image resolution is given.
pub const DEFAULT_PIXELS_PER_PATCH: usize = 8;

/// Inclusive patch rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl Region {
    pub fn full(width: usize, height: usize) -> Self {
        Self { x1: 0, y1: 0, x2: width - 1, y2: height - 1 }
    }

    pub fn coords(&self) -> (usize, usize, usize, usize) {
        (self.x1, self.y1, self.x2, self.y2)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x1..=self.x2).contains(&x) && (self.y1..=self.y2).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)
    }

    /// Uniform over all rectangles of a `width x height` grid.
    pub fn random(rng: &mut impl Rng, width: usize, height: usize) -> Self {
        let (a, b) = (rng.random_range(0..width), rng.random_range(0..width));
        let (c, d) = (rng.random_range(0..height), rng.random_range(0..height));
        Self { x1: a.min(b), x2: a.max(b), y1: c.min(d), y2: c.max(d) }
    }
}

fn default_signal() -> f64 {
    DEFAULT_SIGNAL
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_SIGMA
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub layers: usize,
    pub dim: usize,
    pub width: usize,
    pub height: usize,
    pub tokens: usize,
    /// Vocabulary size; 0 omits token ids and the unembedding.
    #[serde(default)]
    pub vocab: usize,
    #[serde(default)]
    pub region: Option<Region>,
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Layers carrying the signal; all layers when absent.
    #[serde(default)]
    pub signal_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub image_width: Option<usize>,
    #[serde(default)]
    pub image_height: Option<usize>,
    #[serde(default = "default_category")]
    pub category: Category,
    #[serde(default)]
    pub output_probs: bool,
    #[serde(default = "default_true")]
    pub mask: bool,
    /// Draw one noise vector per layer for the whole region instead of one
    /// per patch. Independent per-patch noise makes sub-boxes of the region
    /// compete with it on noise alone.
    #[serde(default = "default_true")]
    pub shared_region_noise: bool,
}

fn default_category() -> Category {
    Category::Other
}

impl SynthSpec {
    pub fn new(layers: usize, dim: usize, width: usize, height: usize, tokens: usize) -> Self {
        Self {
            layers,
            dim,
            width,
            height,
            tokens,
            vocab: 0,
            region: None,
            signal: DEFAULT_SIGNAL,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            signal_layers: None,
            seed: 0,
            image_width: None,
            image_height: None,
            category: Category::Other,
            output_probs: false,
            mask: true,
            shared_region_noise: true,
        }
    }

    pub fn signal_layers(&self) -> Vec<usize> {
        match &self.signal_layers {
            Some(v) => v.clone(),
            None => (0..self.layers).collect(),
        }
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (
            self.image_width.unwrap_or(self.width * DEFAULT_PIXELS_PER_PATCH),
            self.image_height.unwrap_or(self.height * DEFAULT_PIXELS_PER_PATCH),
        )
    }

    /// True (hallucinated) unless a region carries a non-zero signal.
    pub fn hallucinated(&self) -> bool {
        !(self.region.is_some() && self.signal > 0.0 && !self.signal_layers().is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.layers == 0 || self.dim == 0 || self.width == 0 || self.height == 0 || self.tokens == 0 {
            return bad("layers, dim, width, height and tokens must be positive".into());
        }
        if !(self.signal.is_finite() && self.signal >= 0.0) {
            return bad(format!("signal must be finite and >= 0, got {}", self.signal));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if let Some(r) = self.region {
            if r.x1 > r.x2 || r.y1 > r.y2 || r.x2 >= self.width || r.y2 >= self.height {
                return bad(format!("region {r:?} outside {}x{} grid", self.width, self.height));
            }
        }
        if let Some(&l) = self.signal_layers().iter().find(|&&l| l >= self.layers) {
            return bad(format!("signal layer {l} outside [0, {})", self.layers));
        }
        let (iw, ih) = self.image_dims();
        if iw == 0 || ih == 0 {
            return bad("image dimensions must be positive".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate(spec: &SynthSpec) -> Result<EmbeddingTrace> {
    spec.validate()?;
    let SynthSpec { layers, dim: d, width, height, tokens, vocab, .. } = *spec;
    let n = width * height;
    let s = spec.signal;
    let sigma = spec.noise_sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut u: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|x| *x /= norm);
    } else {
        u[0] = 1.0;
    }

    let mut signal_at = vec![false; layers];
    for l in spec.signal_layers() {
        signal_at[l] = true;
    }
    let planted = |rng: &mut ChaCha8Rng, out: &mut Vec<f32>| {
        out.extend(u.iter().map(|&c| (s * c + sigma * gaussian(rng)) as f32));
    };
    let noise = |rng: &mut ChaCha8Rng, out: &mut Vec<f32>| {
        out.extend((0..d).map(|_| gaussian(rng) as f32));
    };

    let mut patch_embeddings = Vec::with_capacity(layers * n * d);
    let mut answer_embeddings = Vec::with_capacity(layers * tokens * d);
    let mut region_vec = Vec::with_capacity(d);
    for l in 0..layers {
        region_vec.clear();
        if signal_at[l] && spec.region.is_some() && spec.shared_region_noise {
            planted(&mut rng, &mut region_vec);
        }
        for j in 0..n {
            let inside = spec.region.is_some_and(|r| r.contains(j % width, j / width));
            if signal_at[l] && inside && spec.shared_region_noise {
                patch_embeddings.extend_from_slice(&region_vec);
            } else if signal_at[l] && inside {
                planted(&mut rng, &mut patch_embeddings);
            } else {
                noise(&mut rng, &mut patch_embeddings);
            }
        }
        for _ in 0..tokens {
            if signal_at[l] {
                planted(&mut rng, &mut answer_embeddings);
            } else {
                noise(&mut rng, &mut answer_embeddings);
            }
        }
    }

    let (answer_token_ids, unembedding) = if vocab > 0 {
        let ids: Vec<u32> = (0..tokens).map(|i| (i % vocab) as u32).collect();
        let mut rows = Vec::with_capacity(vocab * d);
        for v in 0..vocab {
            if v == ids[0] as usize {
                rows.extend(u.iter().map(|&c| (s * c) as f32));
            } else {
                noise(&mut rng, &mut rows);
            }
        }
        (Some(ids), Some(rows))
    } else {
        (None, None)
    };
    let output_probs = spec
        .output_probs
        .then(|| (0..tokens).map(|_| rng.random::<f32>()).collect());

    let (img_w, img_h) = spec.image_dims();
    let gt_mask = match spec.region {
        Some(r) if spec.mask => {
            let pb = pixel_box(r.coords(), (width, height), (img_w, img_h));
            let data = (0..img_h)
                .flat_map(|py| (0..img_w).map(move |px| u8::from(pb.contains_pixel(px, py))))
                .collect();
            Some(Mask::new(img_w, img_h, data)?)
        }
        _ => None,
    };

    let mut extra = BTreeMap::new();
    extra.insert("synth_seed".to_owned(), serde_json::Value::from(spec.seed));
    let metadata = TraceMetadata {
        question: "synthetic".into(),
        answer_text: (0..tokens).map(|i| format!("tok{i}")).collect::<Vec<_>>().join(" "),
        answer_token_strings: (0..tokens).map(|i| format!("tok{i}")).collect(),
        category: spec.category.to_string(),
        image_ref: None,
        original_image_width: img_w as u32,
        original_image_height: img_h as u32,
        extra,
    };
    EmbeddingTrace::new(TraceParts {
        layers,
        dim: d,
        width,
        height,
        tokens,
        patch_embeddings,
        answer_embeddings,
        answer_token_ids,
        output_probs,
        unembedding,
        gt_mask,
        label: Some(spec.hallucinated()),
        metadata,
    })
}

/// A labelled corpus built from one template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub template: SynthSpec,
    pub categories: Vec<Category>,
    /// Traces per category per label.
    pub per_label: usize,
    /// Signal layers overriding the template's, per category.
    #[serde(default)]
    pub category_signal_layers: BTreeMap<Category, Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub entry: ManifestEntry,
    pub spec: SynthSpec,
}

impl CorpusSpec {
    /// Per-trace specs in manifest order. Positives use the template region
    /// or, without one, a region drawn from the trace seed.
    pub fn items(&self) -> Result<Vec<CorpusItem>> {
        if self.per_label == 0 {
            return Err(Error::InvalidSpec("per_label must be at least 1".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::InvalidSpec("no categories".into()));
        }
        let mut out = Vec::new();
        let mut index = 0u64;
        for &category in &self.categories {
            for positive in [true, false] {
                for i in 0..self.per_label {
                    let seed = self.seed ^ index;
                    index += 1;
                    let mut spec = self.template.clone();
                    spec.seed = seed;
                    spec.category = category;
                    if let Some(layers) = self.category_signal_layers.get(&category) {
                        spec.signal_layers = Some(layers.clone());
                    }
                    spec.region = if positive {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ 0x9e37_79b9);
                        Some(spec.region.unwrap_or_else(|| Region::random(&mut rng, spec.width, spec.height)))
                    } else {
                        None
                    };
                    let tag = if positive { "pos" } else { "neg" };
                    out.push(CorpusItem {
                        entry: ManifestEntry {
                            trace_path: format!("{category}_{tag}_{i:04}.clt"),
                            category,
                            split: if i % 2 == 0 { Split::Validation } else { Split::Test },
                        },
                        spec,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Writes every trace, `manifest.jsonl` and `provenance.json` into `dir`.
pub fn generate_corpus(corpus: &CorpusSpec, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let items = corpus.items()?;
    for item in &items {
        item.spec.validate()?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    items
        .par_iter()
        .try_for_each(|item| write_trace(&generate(&item.spec)?, dir.join(&item.entry.trace_path)))?;
    let manifest = DatasetManifest {
        entries: items.iter().map(|i| i.entry.clone()).collect(),
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.jsonl");
    fs::write(&path, manifest.to_jsonl()).map_err(|e| Error::io(&path, e))?;
    let provenance = serde_json::json!({ "corpus": corpus, "traces": items });
    let path = dir.join("provenance.json");
    let text = serde_json::to_string_pretty(&provenance).expect("provenance serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
