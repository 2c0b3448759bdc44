//! `lensground` subcommands. Exit codes: 0 success, 1 usage error, 2 data
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use lensground::eval::{render_table, Averaging, GroundingMode};
use lensground::export::write_heatmap;
use lensground::layers::{
    analyze_grid, grid_search, grid_search_coarse, select_adversarial, select_box_layer, select_by_mean_rank,
    LayersConfig, ModelLayers,
};
use lensground::synth::{generate, generate_corpus, CorpusSpec, SynthSpec};
use lensground::{load_manifest, read_trace, write_trace, Category, DetectLayers, Error, Split};

use crate::api::{self, AppState, ServiceConfig};
use crate::engine::{self, DetectMethod, DetectParams, DetectionEvalParams, GroundMode, GroundParams, GroundResponse};
use crate::registry::SessionRegistry;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lensground", version, about = "Hallucination detection and visual grounding over recorded VLM traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score one trace and print {confidence, patch_scores}.
    Detect {
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        method: DetectMethod,
        /// Text layer.
        #[arg(long = "lt")]
        text_layer: Option<usize>,
        /// Image layer.
        #[arg(long = "li")]
        image_layer: Option<usize>,
        #[arg(long, env = "LENSGROUND_LAYERS")]
        layers: Option<PathBuf>,
    },
    /// Ground an answer span as a heatmap or boxes.
    Ground {
        trace: PathBuf,
        /// Token range `A:B`, end exclusive. Defaults to the full answer.
        #[arg(long, value_parser = parse_span)]
        span: Option<(usize, usize)>,
        #[arg(long, value_enum, default_value_t)]
        mode: GroundMode,
        /// Box layer.
        #[arg(long = "lb")]
        box_layer: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        iou_max: Option<f64>,
        /// `.pgm` for a greyscale heatmap, anything else for JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "LENSGROUND_LAYERS")]
        layers: Option<PathBuf>,
    },
    /// Per-category detection mAP table followed by JSON reports.
    EvalDetect {
        manifest: PathBuf,
        /// Comma-separated `cl,ll,outprobs,random`.
        #[arg(long, value_delimiter = ',', default_value = "cl")]
        method: Vec<String>,
        #[arg(long, env = "LENSGROUND_LAYERS")]
        layers: Option<PathBuf>,
        #[arg(long = "li", requires = "text_layer")]
        image_layer: Option<usize>,
        #[arg(long = "lt", requires = "image_layer")]
        text_layer: Option<usize>,
        #[arg(long, value_parser = serde_enum::<Split>, default_value = "test")]
        split: Split,
    },
    /// Grounding precision/recall over the masked traces of a split.
    EvalGround {
        manifest: PathBuf,
        /// `heatmap`, `bbox` or `ll`.
        #[arg(long, value_parser = serde_enum::<GroundingMode>, default_value = "heatmap")]
        mode: GroundingMode,
        /// CSV for the curve, JSON for box points.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = serde_enum::<Averaging>, default_value = "micro")]
        averaging: Averaging,
        #[arg(long = "lb")]
        box_layer: Option<usize>,
        #[arg(long, value_parser = serde_enum::<Split>, default_value = "test")]
        split: Split,
        #[arg(long, env = "LENSGROUND_LAYERS")]
        layers: Option<PathBuf>,
    },
    /// Select layers on the validation split and write layers.json.
    Layers {
        manifest: PathBuf,
        /// Exclude this category from selection.
        #[arg(long, value_parser = serde_enum::<Category>)]
        adversarial: Option<Category>,
        /// Stride-2 search refined around each category's best pair.
        #[arg(long)]
        coarse: bool,
        #[arg(long, default_value = "layers.json")]
        out: PathBuf,
        #[arg(long, default_value = LayersConfig::DEFAULT_MODEL)]
        model_id: String,
    },
    /// Generate a synthetic trace or corpus from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "LENSGROUND_ADDR", default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, env = "LENSGROUND_DATA")]
        data: Option<PathBuf>,
        #[arg(long, env = "LENSGROUND_LAYERS")]
        layers: Option<PathBuf>,
        #[arg(long, default_value_t = api::DEFAULT_MAX_UPLOAD_BYTES)]
        max_upload_bytes: usize,
        #[arg(long, default_value_t = api::DEFAULT_EVAL_TIMEOUT.as_secs())]
        eval_timeout_secs: u64,
    },
}

fn parse_span(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected A:B, got {s:?}"))?;
    let a = a.trim().parse().map_err(|e| format!("span start: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("span end: {e}"))?;
    Ok((a, b))
}

fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error [{}]: {e}", e.code());
            EXIT_DATA
        }
    }
}

fn load_layers(path: Option<&Path>) -> Result<LayersConfig, Error> {
    match path {
        Some(p) => LayersConfig::load(p),
        None => Ok(LayersConfig::default()),
    }
}

fn emit(text: &str) {
    // A closed stdout pipe is not an error.
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.flush());
}

fn print_json<T: serde::Serialize>(value: &T) {
    emit(&format!("{}\n", serde_json::to_string_pretty(value).expect("output serializes")));
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Detect { trace, method, text_layer, image_layer, layers } => {
            let config = load_layers(layers.as_deref())?;
            let trace = read_trace(&trace)?;
            let params = DetectParams { method, text_layer, image_layer };
            print_json(&engine::detect(&trace, &params, &config)?);
        }
        Command::Ground { trace, span, mode, box_layer, k, iou_max, out, layers } => {
            let config = load_layers(layers.as_deref())?;
            let trace = read_trace(&trace)?;
            let params = GroundParams {
                span_start: span.map(|s| s.0),
                span_end: span.map(|s| s.1),
                mode,
                box_layer,
                k,
                iou_max,
            };
            let response = engine::ground(&trace, &params, &config)?;
            if let Some(out) = &out {
                match &response {
                    GroundResponse::Heatmap { resized, image_width, image_height, .. } => {
                        write_heatmap(out, resized, *image_width, *image_height)?
                    }
                    other => write_file(out, serde_json::to_vec_pretty(other).expect("json"))?,
                }
            }
            print_json(&response);
        }
        Command::EvalDetect { manifest, method, layers, image_layer, text_layer, split } => {
            let config = load_layers(layers.as_deref())?;
            let pair = image_layer.zip(text_layer).map(|(image, text)| DetectLayers { image, text });
            let params = DetectionEvalParams { manifest_path: manifest, method, layers: pair, split };
            let reports = engine::eval_detection(&params, &config)?;
            emit(&render_table(&reports));
            print_json(&reports);
        }
        Command::EvalGround { manifest, mode, out, averaging, box_layer, split, layers } => {
            let config = load_layers(layers.as_deref())?;
            let params = engine::GroundingEvalParams {
                manifest_path: manifest,
                mode,
                averaging: Some(averaging),
                box_layer,
                split,
            };
            let report = engine::eval_grounding(&params, &config)?;
            if let Some(out) = &out {
                match &report.curve {
                    Some(curve) => write_file(out, curve.to_csv())?,
                    None => write_file(out, serde_json::to_vec_pretty(&report).expect("json"))?,
                }
            }
            print_json(&report);
        }
        Command::Layers { manifest, adversarial, coarse, out, model_id } => {
            let manifest = load_manifest(&manifest)?;
            let entries = lensground::eval::load_split(&manifest, Split::Validation)?;
            let grid = if coarse { grid_search_coarse(&entries)? } else { grid_search(&entries, None)? };
            let chosen = match adversarial {
                Some(held_out) => select_adversarial(&grid, held_out)?,
                None => select_by_mean_rank(&grid, &grid.categories().into_iter().collect::<Vec<_>>())?,
            };
            let bbox = match select_box_layer(&entries) {
                Ok((layer, _)) => Some(layer),
                Err(Error::MissingMask) => None,
                Err(e) => return Err(e.into()),
            };
            let mut config = if out.exists() { LayersConfig::load(&out)? } else { LayersConfig::default() };
            config.0.insert(model_id, ModelLayers { image: chosen.image, text: chosen.text, bbox });
            config.save(&out)?;
            print_json(&serde_json::json!({
                "selected": ModelLayers { image: chosen.image, text: chosen.text, bbox },
                "held_out": adversarial,
                "analysis": analyze_grid(&grid)?,
            }));
        }
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
            match serde_json::from_str::<SynthInput>(&text) {
                Ok(SynthInput::Corpus(corpus)) => {
                    let m = generate_corpus(&corpus, &out)?;
                    print_json(&serde_json::json!({
                        "manifest": out.join("manifest.jsonl"),
                        "traces": m.entries.len(),
                    }));
                }
                Ok(SynthInput::Single(s)) => {
                    let path = if out.extension().is_some_and(|e| e == "clt") {
                        out
                    } else {
                        std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
                        out.join("trace.clt")
                    };
                    let trace = generate(&s)?;
                    write_trace(&trace, &path)?;
                    print_json(&serde_json::json!({ "trace": path, "hallucinated": trace.label() }));
                }
                Err(e) => {
                    return Err(Error::Parse { line: e.line(), message: e.to_string() }.into());
                }
            }
        }
        Command::Serve { addr, data, layers, max_upload_bytes, eval_timeout_secs } => {
            let config = load_layers(layers.as_deref())?;
            if let Some(dir) = &data {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            }
            let registry = SessionRegistry::new(data, config);
            let loaded = registry.load_data_dir()?;
            let state = AppState {
                registry: Arc::new(registry),
                config: ServiceConfig { max_upload_bytes, eval_timeout: Duration::from_secs(eval_timeout_secs) },
            };
            serve(&addr, state, loaded)?;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SynthInput {
    Corpus(CorpusSpec),
    Single(SynthSpec),
}

fn serve(addr: &str, state: AppState, loaded: usize) -> Result<(), CliError> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
        eprintln!("listening on {} ({loaded} traces loaded)", listener.local_addr().map_or_else(|_| addr.to_owned(), |a| a.to_string()));
        axum::serve(listener, api::router(state))
            .await
            .map_err(|e| CliError::Usage(e.to_string()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_parsing() {
        assert_eq!(parse_span("2:5"), Ok((2, 5)));
        assert!(parse_span("2").is_err());
        assert!(parse_span("a:3").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["lensground", "detect"]), EXIT_USAGE);
        assert_eq!(run(["lensground", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["lensground", "ground", "x.clt", "--span", "7"]), EXIT_USAGE);
        assert_eq!(run(["lensground", "detect", "x.clt", "--method", "zz"]), EXIT_USAGE);
    }

    #[test]
    fn missing_file_is_data_error() {
        assert_eq!(run(["lensground", "detect", "/nonexistent/x.clt"]), EXIT_DATA);
    }

    #[test]
    fn enum_flags_parse() {
        assert_eq!(serde_enum::<GroundingMode>("bbox"), Ok(GroundingMode::Bbox));
        assert_eq!(serde_enum::<Category>("ocr"), Ok(Category::Ocr));
        assert!(serde_enum::<Split>("train").is_err());
    }
}
