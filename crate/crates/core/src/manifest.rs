//! JSON-lines dataset manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Action,
    Attribute,
    Comparison,
    Count,
    Environment,
    Relation,
    Ocr,
    Other,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Action,
        Category::Attribute,
        Category::Comparison,
        Category::Count,
        Category::Environment,
        Category::Relation,
        Category::Ocr,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Action => "action",
            Category::Attribute => "attribute",
            Category::Comparison => "comparison",
            Category::Count => "count",
            Category::Environment => "environment",
            Category::Relation => "relation",
            Category::Ocr => "ocr",
            Category::Other => "other",
        }
    }

    /// Display label used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Category::Action => "Action",
            Category::Attribute => "Attribute",
            Category::Comparison => "Comparison",
            Category::Count => "Count",
            Category::Environment => "Environment",
            Category::Relation => "Relation",
            Category::Ocr => "OCR",
            Category::Other => "Other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownCategory {
                name: s.to_owned(),
                line: None,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument {
                field: "split",
                message: format!("expected validation|test, got {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub trace_path: String,
    pub category: Category,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative `trace_path`s resolve against.
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
struct RawEntry {
    trace_path: String,
    category: String,
    split: Split,
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let category = raw.category.parse().map_err(|_| Error::UnknownCategory {
                name: raw.category.clone(),
                line: Some(line_no),
            })?;
            entries.push(ManifestEntry {
                trace_path: raw.trace_path,
                category,
                split: raw.split,
            });
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.trace_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entries serialize"));
            out.push('\n');
        }
        out
    }
}

/// Loads a manifest; relative trace paths resolve against the manifest's
/// directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, base)
}
