use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    logit_lens_detection_with, logit_lens_patch_probe, output_probs_detection, TokenAggregation,
};
use crate::error::{Error, Result};
use crate::manifest::{Category, DatasetManifest, Split};
use crate::scoring::{contextual_lens, detection_confidence, DetectLayers, TokenSpan};
use crate::trace::{read_trace, EmbeddingTrace};

/// One scored example. `support_score` is high when the answer looks
/// visually supported; `hallucinated` is the positive class for AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub trace_id: String,
    pub category: Category,
    pub support_score: f64,
    pub hallucinated: bool,
}

/// Step-interpolated average precision with hallucination as the positive
/// class, ranked by descending `1 - support_score`.
///
/// Records sharing a score form one threshold group.
pub fn average_precision(records: &[DetectionRecord]) -> Result<f64> {
    let positives = records.iter().filter(|r| r.hallucinated).count();
    if positives == 0 {
        return Err(Error::NoPositives { category: None });
    }
    if let Some(r) = records.iter().find(|r| !r.support_score.is_finite()) {
        return Err(Error::invariant(
            "support_score",
            format!("non-finite score for {}", r.trace_id),
        ));
    }
    // Ascending support == descending hallucination score, without the
    // rounding that forming 1 - s would introduce.
    let mut order: Vec<(f64, bool)> = records
        .iter()
        .map(|r| (r.support_score, r.hallucinated))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = positives as f64;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = order[i].0;
        while i < order.len() && order[i].0 == score {
            seen += 1;
            tp += usize::from(order[i].1);
            i += 1;
        }
        let recall = tp as f64 / total;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// A hallucination detector producing support scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method")]
pub enum Detector {
    /// Seeded uniform score per trace id.
    #[serde(rename = "random")]
    Random { seed: u64 },
    #[serde(rename = "ll")]
    LogitLens {
        #[serde(default)]
        aggregation: TokenAggregation,
    },
    #[serde(rename = "outprobs")]
    OutputProbs,
    /// Contextual embeddings; `None` uses the middle layer of each trace.
    #[serde(rename = "cl")]
    ContextualLens {
        #[serde(default)]
        layers: Option<DetectLayers>,
    },
}

impl Detector {
    pub const RANDOM_SEED: u64 = 0x5eed;

    pub fn tag(&self) -> &'static str {
        match self {
            Detector::Random { .. } => "random",
            Detector::LogitLens { .. } => "ll",
            Detector::OutputProbs => "outprobs",
            Detector::ContextualLens { .. } => "cl",
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            Detector::Random { .. } => "Random",
            Detector::LogitLens { .. } => "LL",
            Detector::OutputProbs => "Out Probs",
            Detector::ContextualLens { .. } => "CL",
        }
    }

    /// Parses `random|ll|outprobs|cl` with default settings.
    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "random" => Detector::Random {
                seed: Self::RANDOM_SEED,
            },
            "ll" => Detector::LogitLens {
                aggregation: TokenAggregation::default(),
            },
            "outprobs" => Detector::OutputProbs,
            "cl" => Detector::ContextualLens { layers: None },
            other => {
                return Err(Error::InvalidArgument {
                    field: "method",
                    message: format!("expected random|ll|outprobs|cl, got {other:?}"),
                })
            }
        })
    }

    /// Support score for the full answer of `trace`.
    pub fn support_score(&self, trace: &EmbeddingTrace, trace_id: &str) -> Result<f64> {
        let span = TokenSpan::full(trace.tokens());
        match *self {
            Detector::Random { seed } => Ok(random_score(seed, trace_id)),
            Detector::LogitLens { aggregation } => {
                logit_lens_detection_with(&logit_lens_patch_probe(trace, span)?, aggregation)
            }
            Detector::OutputProbs => output_probs_detection(trace, span),
            Detector::ContextualLens { layers } => {
                let layers = layers.unwrap_or_else(|| DetectLayers::middle(trace.layers()));
                detection_confidence(&contextual_lens(trace, span, layers)?)
            }
        }
    }
}

fn random_score(seed: u64, trace_id: &str) -> f64 {
    // FNV-1a keeps the score a pure function of (seed, id).
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in trace_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h).random::<f64>()
}

/// A trace loaded from a manifest split, with its manifest identity.
#[derive(Debug, Clone)]
pub struct LoadedEntry {
    pub trace_id: String,
    pub category: Category,
    pub trace: Arc<EmbeddingTrace>,
}

/// Reads every trace of `split`, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedEntry>> {
    manifest
        .split(split)
        .map(|e| {
            Ok(LoadedEntry {
                trace_id: e.trace_path.clone(),
                category: e.category,
                trace: Arc::new(read_trace(manifest.resolve(e))?),
            })
        })
        .collect()
}

pub fn detection_records(entries: &[LoadedEntry], detector: &Detector) -> Result<Vec<DetectionRecord>> {
    entries
        .iter()
        .map(|e| scored_record(e, |t| detector.support_score(t, &e.trace_id)))
        .collect()
}

pub(crate) fn scored_record(
    entry: &LoadedEntry,
    score: impl FnOnce(&EmbeddingTrace) -> Result<f64>,
) -> Result<DetectionRecord> {
    let hallucinated = entry.trace.label().ok_or_else(|| Error::MissingLabel {
        trace: entry.trace_id.clone(),
    })?;
    Ok(DetectionRecord {
        trace_id: entry.trace_id.clone(),
        category: entry.category,
        support_score: score(&entry.trace)?,
        hallucinated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub records: usize,
    pub positives: usize,
}

/// Per-category detection mAP for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: Split,
    pub per_category_map: BTreeMap<Category, f64>,
    pub counts: BTreeMap<Category, CategoryCounts>,
    /// Mean of `per_category_map` over scored categories.
    pub mean_map: Option<f64>,
    pub notes: Vec<String>,
}

/// Groups records by category and computes AP per group. Categories with no
/// positives are noted rather than failing the report.
pub fn report_from_records(method: &str, split: Split, records: &[DetectionRecord]) -> EvalReport {
    let mut sorted: Vec<&DetectionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    let mut groups: BTreeMap<Category, Vec<DetectionRecord>> = BTreeMap::new();
    for r in sorted {
        groups.entry(r.category).or_default().push(r.clone());
    }
    let mut per_category_map = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut notes = Vec::new();
    for (cat, recs) in &groups {
        let positives = recs.iter().filter(|r| r.hallucinated).count();
        counts.insert(
            *cat,
            CategoryCounts {
                records: recs.len(),
                positives,
            },
        );
        match average_precision(recs) {
            Ok(ap) => {
                per_category_map.insert(*cat, ap);
            }
            Err(e) => notes.push(format!("{cat}: {e}")),
        }
    }
    let mean_map = (!per_category_map.is_empty())
        .then(|| per_category_map.values().sum::<f64>() / per_category_map.len() as f64);
    EvalReport {
        method: method.to_owned(),
        split,
        per_category_map,
        counts,
        mean_map,
        notes,
    }
}

pub fn map_by_category(manifest: &DatasetManifest, detector: &Detector, split: Split) -> Result<EvalReport> {
    let entries = load_split(manifest, split)?;
    let records = detection_records(&entries, detector)?;
    Ok(report_from_records(detector.tag(), split, &records))
}

fn method_title(tag: &str) -> &str {
    match tag {
        "random" => "Random",
        "ll" => "LL",
        "outprobs" => "Out Probs",
        "cl" => "CL",
        other => other,
    }
}

/// Aligned text table: one row per category, one column per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut cats: Vec<Category> = reports
        .iter()
        .flat_map(|r| r.counts.keys().copied())
        .collect();
    cats.sort();
    cats.dedup();
    let titles: Vec<&str> = reports.iter().map(|r| method_title(&r.method)).collect();
    let col_w = titles.iter().map(|t| t.len()).max().unwrap_or(0).max(6);
    let name_w = cats
        .iter()
        .map(|c| c.title().len())
        .chain(["Category".len(), "Mean".len()])
        .max()
        .unwrap();
    let cell = |v: Option<&f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.3}"));
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Category");
    for t in &titles {
        let _ = write!(out, " | {t:>col_w$}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + titles.len() * (col_w + 3)));
    out.push('\n');
    for c in &cats {
        let _ = write!(out, "{:<name_w$}", c.title());
        for r in reports {
            let _ = write!(out, " | {:>col_w$}", cell(r.per_category_map.get(c)));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<name_w$}", "Mean");
    for r in reports {
        let _ = write!(out, " | {:>col_w$}", cell(r.mean_map.as_ref()));
    }
    out.push('\n');
    out
}
