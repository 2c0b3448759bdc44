//! Uploaded traces keyed by the SHA-256 of their bytes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};

use lensground::layers::LayersConfig;
use lensground::{EmbeddingTrace, Error, Result};

/// Image bytes passed through to the UI unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredImage {
    pub content_type: String,
    pub bytes: Arc<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub trace: Arc<EmbeddingTrace>,
    pub image: Option<StoredImage>,
}

#[derive(Debug, Default)]
pub struct SessionRegistry {
    sessions: RwLock<HashMap<String, Session>>,
    data_dir: Option<PathBuf>,
    layers: LayersConfig,
}

pub fn trace_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const IMAGE_TYPES: [(&str, &str); 4] = [
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("webp", "image/webp"),
];

fn extension_for(content_type: &str) -> &'static str {
    IMAGE_TYPES
        .iter()
        .find(|(_, ct)| *ct == content_type)
        .map_or("bin", |(ext, _)| ext)
}

impl SessionRegistry {
    pub fn new(data_dir: Option<PathBuf>, layers: LayersConfig) -> Self {
        Self { sessions: RwLock::default(), data_dir, layers }
    }

    pub fn layers(&self) -> &LayersConfig {
        &self.layers
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    /// Registers every `*.clt` under the data directory, with a same-stem
    /// image when one exists. Returns the number of traces loaded.
    pub fn load_data_dir(&self) -> Result<usize> {
        let Some(dir) = &self.data_dir else { return Ok(0) };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_error(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "clt"))
            .collect();
        paths.sort();
        for path in &paths {
            let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
            let image = IMAGE_TYPES.iter().find_map(|(ext, ct)| {
                let p = path.with_extension(ext);
                fs::read(&p).ok().map(|b| StoredImage { content_type: (*ct).to_owned(), bytes: Arc::new(b) })
            });
            self.insert(&bytes, image, false)?;
        }
        Ok(paths.len())
    }

    /// Parses and stores a trace, persisting it under the data directory.
    /// Re-registering identical bytes is a no-op apart from the image.
    pub fn register(&self, bytes: &[u8], image: Option<StoredImage>) -> Result<String> {
        self.insert(bytes, image, true)
    }

    fn insert(&self, bytes: &[u8], image: Option<StoredImage>, persist: bool) -> Result<String> {
        let trace = EmbeddingTrace::from_bytes(bytes)?;
        let id = trace_id(bytes);
        if let (true, Some(dir)) = (persist, &self.data_dir) {
            let path = dir.join(format!("{id}.clt"));
            fs::write(&path, bytes).map_err(|e| io_error(&path, e))?;
            if let Some(img) = &image {
                let path = dir.join(format!("{id}.{}", extension_for(&img.content_type)));
                fs::write(&path, img.bytes.as_slice()).map_err(|e| io_error(&path, e))?;
            }
        }
        let mut sessions = self.sessions.write().expect("registry lock");
        let image = image.or_else(|| sessions.get(&id).and_then(|s| s.image.clone()));
        sessions.insert(id.clone(), Session { trace: Arc::new(trace), image });
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<Session> {
        self.sessions.read().expect("registry lock").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}
