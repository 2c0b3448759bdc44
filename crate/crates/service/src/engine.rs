//! Request handling shared by the CLI and the HTTP API, so both produce the
//! same numbers for the same input.

use serde::{Deserialize, Serialize};

use lensground::baselines::{logit_lens_detection, logit_lens_patch_probe, output_probs_detection};
use lensground::grounding::{
    layerwise_final_scores, search_boxes, top_k_boxes, BoxCandidate, BoxSearchOptions,
};
use lensground::eval::{
    detection_records, evaluate_grounding, load_split, report_from_records, Averaging, Detector,
    EvalReport, GroundingMode, GroundingOptions, GroundingReport,
};
use lensground::layers::LayersConfig;
use lensground::scoring::{contextual_lens, detection_confidence};
use lensground::{load_manifest, DetectLayers, EmbeddingTrace, Error, Result, Split, TokenSpan};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_IOU_MAX: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DetectMethod {
    #[default]
    Cl,
    Ll,
    Outprobs,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    #[serde(default)]
    pub method: DetectMethod,
    #[serde(rename = "l_T", default)]
    pub text_layer: Option<usize>,
    #[serde(rename = "l_I", default)]
    pub image_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub method: DetectMethod,
    pub confidence: f64,
    /// Row-major per-patch scores; empty for `outprobs`.
    pub patch_scores: Vec<f64>,
    /// Layers used by `cl`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<DetectLayers>,
}

/// Explicit layers first, then the model's `layers.json` entry, then the
/// middle layer.
pub fn resolve_detect_layers(
    trace: &EmbeddingTrace,
    config: &LayersConfig,
    image: Option<usize>,
    text: Option<usize>,
) -> DetectLayers {
    let fallback = config
        .for_model(trace.metadata().model_id())
        .map(|m| m.detect())
        .unwrap_or_else(|| DetectLayers::middle(trace.layers()));
    DetectLayers {
        image: image.unwrap_or(fallback.image),
        text: text.unwrap_or(fallback.text),
    }
}

pub fn detect(trace: &EmbeddingTrace, params: &DetectParams, config: &LayersConfig) -> Result<DetectResponse> {
    let span = TokenSpan::full(trace.tokens());
    match params.method {
        DetectMethod::Cl => {
            let layers = resolve_detect_layers(trace, config, params.image_layer, params.text_layer);
            let map = contextual_lens(trace, span, layers)?;
            Ok(DetectResponse {
                method: params.method,
                confidence: detection_confidence(&map)?,
                patch_scores: map.scores,
                layers: Some(layers),
            })
        }
        DetectMethod::Ll => {
            let map = logit_lens_patch_probe(trace, span)?;
            Ok(DetectResponse {
                method: params.method,
                confidence: logit_lens_detection(&map)?,
                patch_scores: map.mean_map,
                layers: None,
            })
        }
        DetectMethod::Outprobs => Ok(DetectResponse {
            method: params.method,
            confidence: output_probs_detection(trace, span)?,
            patch_scores: Vec::new(),
            layers: None,
        }),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GroundMode {
    #[default]
    Heatmap,
    Bbox,
    Topk,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundParams {
    pub span_start: Option<usize>,
    pub span_end: Option<usize>,
    #[serde(default)]
    pub mode: GroundMode,
    #[serde(rename = "l_b", default)]
    pub box_layer: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub iou_max: Option<f64>,
}

impl GroundParams {
    pub fn span(&self, tokens: usize) -> TokenSpan {
        TokenSpan::new(self.span_start.unwrap_or(0), self.span_end.unwrap_or(tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GroundResponse {
    Heatmap {
        span: TokenSpan,
        width: usize,
        height: usize,
        grid: Vec<f64>,
        layer_argmax: Vec<usize>,
        image_width: usize,
        image_height: usize,
        resized: Vec<f64>,
    },
    Bbox {
        span: TokenSpan,
        layer: usize,
        #[serde(rename = "box")]
        best: BoxCandidate,
        candidates_scored: usize,
    },
    Topk {
        span: TokenSpan,
        layer: usize,
        boxes: Vec<BoxCandidate>,
    },
}

pub fn box_layer(trace: &EmbeddingTrace, config: &LayersConfig, explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| config.for_model(trace.metadata().model_id()).and_then(|m| m.bbox))
        .unwrap_or(trace.layers() / 2)
}

pub fn ground(trace: &EmbeddingTrace, params: &GroundParams, config: &LayersConfig) -> Result<GroundResponse> {
    let span = params.span(trace.tokens());
    span.check(trace.tokens())?;
    match params.mode {
        GroundMode::Heatmap => {
            let h = layerwise_final_scores(trace, span)?;
            Ok(GroundResponse::Heatmap {
                span,
                width: h.width,
                height: h.height,
                grid: h.grid,
                layer_argmax: h.layer_argmax,
                image_width: h.img_w,
                image_height: h.img_h,
                resized: h.resized,
            })
        }
        GroundMode::Bbox => {
            let layer = box_layer(trace, config, params.box_layer);
            let out = search_boxes(trace, span, layer, &BoxSearchOptions::default())?;
            Ok(GroundResponse::Bbox {
                span,
                layer,
                best: out.best,
                candidates_scored: out.candidates_scored,
            })
        }
        GroundMode::Topk => {
            let layer = box_layer(trace, config, params.box_layer);
            let k = params.k.unwrap_or(DEFAULT_TOP_K);
            let iou_max = params.iou_max.unwrap_or(DEFAULT_IOU_MAX);
            if k == 0 {
                return Err(Error::InvalidArgument { field: "k", message: "k must be at least 1".into() });
            }
            if !(0.0..=1.0).contains(&iou_max) {
                return Err(Error::InvalidArgument {
                    field: "iou_max",
                    message: format!("expected a value in [0, 1], got {iou_max}"),
                });
            }
            let boxes = top_k_boxes(trace, span, layer, k, iou_max, &BoxSearchOptions::default())?;
            Ok(GroundResponse::Topk { span, layer, boxes })
        }
    }
}

/// Per-trace summary returned by `/meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub trace_id: String,
    pub layers: usize,
    pub dim: usize,
    pub width: usize,
    pub height: usize,
    pub tokens: usize,
    pub vocab: usize,
    pub has_unembedding: bool,
    pub has_output_probs: bool,
    pub has_mask: bool,
    pub hallucinated: Option<bool>,
    pub has_image: bool,
    pub token_strings: Vec<String>,
    pub metadata: lensground::TraceMetadata,
}

pub fn trace_meta(trace_id: &str, trace: &EmbeddingTrace, has_image: bool) -> TraceMeta {
    TraceMeta {
        trace_id: trace_id.to_owned(),
        layers: trace.layers(),
        dim: trace.dim(),
        width: trace.width(),
        height: trace.height(),
        tokens: trace.tokens(),
        vocab: trace.vocab(),
        has_unembedding: trace.unembedding().is_some(),
        has_output_probs: trace.output_probs().is_some(),
        has_mask: trace.gt_mask().is_some(),
        hallucinated: trace.label(),
        has_image,
        token_strings: trace.metadata().answer_token_strings.clone(),
        metadata: trace.metadata().clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvalParams {
    pub manifest_path: std::path::PathBuf,
    /// One or more of `cl|ll|outprobs|random`.
    #[serde(deserialize_with = "one_or_many")]
    pub method: Vec<String>,
    #[serde(default)]
    pub layers: Option<DetectLayers>,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Test
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

/// One report per method over the same loaded split.
pub fn eval_detection(params: &DetectionEvalParams, config: &LayersConfig) -> Result<Vec<EvalReport>> {
    let manifest = load_manifest(&params.manifest_path)?;
    let entries = load_split(&manifest, params.split)?;
    let mut reports = Vec::with_capacity(params.method.len());
    for tag in &params.method {
        let mut detector = Detector::from_tag(tag)?;
        if let Detector::ContextualLens { layers } = &mut detector {
            *layers = params.layers.or_else(|| {
                let model = entries.first().and_then(|e| e.trace.metadata().model_id().map(str::to_owned));
                config.for_model(model.as_deref()).map(|m| m.detect())
            });
        }
        let records = detection_records(&entries, &detector)?;
        let mut report = report_from_records(detector.tag(), params.split, &records);
        if let Detector::ContextualLens { layers: Some(l) } = detector {
            report.notes.push(format!("layers l_I={} l_T={}", l.image, l.text));
        }
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingEvalParams {
    pub manifest_path: std::path::PathBuf,
    pub mode: GroundingMode,
    #[serde(default)]
    pub averaging: Option<Averaging>,
    #[serde(rename = "l_b", default)]
    pub box_layer: Option<usize>,
    #[serde(default = "default_split")]
    pub split: Split,
}

pub fn eval_grounding(params: &GroundingEvalParams, config: &LayersConfig) -> Result<GroundingReport> {
    let manifest = load_manifest(&params.manifest_path)?;
    let opts = GroundingOptions {
        split: params.split,
        averaging: params.averaging.unwrap_or_default(),
        box_layer: params.box_layer.or_else(|| config.for_model(None).and_then(|m| m.bbox)),
        ..GroundingOptions::default()
    };
    evaluate_grounding(&manifest, params.mode, &opts)
}
