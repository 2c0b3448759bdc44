//! Binary embedding-trace files (`CLT1`, version 1).
//!
//! Layout, all little-endian, no padding between sections:
//!
//! ```text
//! "CLT1" | u32 version | u32 L | u32 d | u32 W | u32 H | u32 k | u32 V
//!        | u32 flags | u32 mask_w | u32 mask_h | u8 label | 3 pad bytes
//! f32[L][W*H][d]  patch embeddings (layer, then patch j = y*W + x, then dim)
//! f32[L][k][d]    answer-token embeddings
//! u32[k]          answer token ids          (flag bit 0)
//! f32[k]          output probabilities      (flag bit 1)
//! f32[V][d]       unembedding matrix        (flag bit 0)
//! u8[mask_h][mask_w] ground-truth mask      (flag bit 2)
//! u32 json_len | UTF-8 JSON metadata
//! ```
//!
//! A parsed [`EmbeddingTrace`] is fully validated and cannot be mutated.
//! To derive a modified trace, go through [`EmbeddingTrace::into_parts`] and
//! [`EmbeddingTrace::new`], which re-validates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CLT1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 48;

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct TraceFlags: u32 {
        const HAS_UNEMBEDDING = 1 << 0;
        const HAS_OUTPUT_PROBS = 1 << 1;
        const HAS_GT_MASK = 1 << 2;
        const HAS_LABEL = 1 << 3;
    }
}

/// Fixed-size file header. Field names follow the on-disk order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: u32,
    pub layers: u32,
    pub dim: u32,
    pub width: u32,
    pub height: u32,
    pub tokens: u32,
    pub vocab: u32,
    pub flags: TraceFlags,
    pub mask_w: u32,
    pub mask_h: u32,
    /// 1 = hallucinated. Only meaningful with [`TraceFlags::HAS_LABEL`].
    pub label: u8,
}

impl TraceHeader {
    pub fn patches(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// The hallucination label, if the trace carries one.
    pub fn hallucinated(&self) -> Option<bool> {
        self.flags
            .contains(TraceFlags::HAS_LABEL)
            .then_some(self.label == 1)
    }

    fn check(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        for (field, value) in [
            ("layers", self.layers),
            ("dim", self.dim),
            ("width", self.width),
            ("height", self.height),
            ("tokens", self.tokens),
        ] {
            if value == 0 {
                return Err(Error::invariant(field, "must be at least 1"));
            }
        }
        let f = self.flags;
        if f.contains(TraceFlags::HAS_UNEMBEDDING) != (self.vocab > 0) {
            return Err(Error::invariant(
                "vocab",
                "must be >= 1 exactly when the unembedding flag is set",
            ));
        }
        if f.contains(TraceFlags::HAS_GT_MASK) {
            if self.mask_w == 0 || self.mask_h == 0 {
                return Err(Error::invariant("mask_w", "mask dims must be >= 1"));
            }
        } else if self.mask_w != 0 || self.mask_h != 0 {
            return Err(Error::invariant("mask_w", "mask dims must be 0 without a mask"));
        }
        if f.contains(TraceFlags::HAS_LABEL) {
            if self.label > 1 {
                return Err(Error::invariant("label", "must be 0 or 1"));
            }
        } else if self.label != 0 {
            return Err(Error::invariant("label", "must be 0 when unlabeled"));
        }
        Ok(())
    }

    /// Total file length implied by the header, excluding the JSON payload
    /// and its length prefix.
    fn body_len(&self) -> Option<u64> {
        let l = u64::from(self.layers);
        let d = u64::from(self.dim);
        let n = u64::from(self.width).checked_mul(u64::from(self.height))?;
        let k = u64::from(self.tokens);
        let v = u64::from(self.vocab);
        let mut total = HEADER_LEN as u64;
        total = total.checked_add(l.checked_mul(n)?.checked_mul(d)?.checked_mul(4)?)?;
        total = total.checked_add(l.checked_mul(k)?.checked_mul(d)?.checked_mul(4)?)?;
        if self.flags.contains(TraceFlags::HAS_UNEMBEDDING) {
            total = total.checked_add(k * 4)?;
        }
        if self.flags.contains(TraceFlags::HAS_OUTPUT_PROBS) {
            total = total.checked_add(k * 4)?;
        }
        if self.flags.contains(TraceFlags::HAS_UNEMBEDDING) {
            total = total.checked_add(v.checked_mul(d)?.checked_mul(4)?)?;
        }
        if self.flags.contains(TraceFlags::HAS_GT_MASK) {
            total = total.checked_add(u64::from(self.mask_w) * u64::from(self.mask_h))?;
        }
        Some(total)
    }
}

/// Pixel-level ground-truth mask at the original image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    /// Row-major, 0 = background, nonzero = foreground.
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invariant("gt_mask", "mask dims must be >= 1"));
        }
        if data.len() != width * height {
            return Err(Error::invariant(
                "gt_mask",
                format!("expected {} bytes, got {}", width * height, data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn is_foreground(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }
}

/// JSON metadata block. Unknown keys are preserved in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub answer_text: String,
    pub answer_token_strings: Vec<String>,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub original_image_width: u32,
    pub original_image_height: u32,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl TraceMetadata {
    /// Model identifier recorded by the extractor, if any.
    pub fn model_id(&self) -> Option<&str> {
        self.extra.get("model_id").and_then(|v| v.as_str())
    }
}

/// Owned, unvalidated trace contents.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceParts {
    pub layers: usize,
    pub dim: usize,
    pub width: usize,
    pub height: usize,
    pub tokens: usize,
    /// `[L][n][d]`, flattened.
    pub patch_embeddings: Vec<f32>,
    /// `[L][k][d]`, flattened.
    pub answer_embeddings: Vec<f32>,
    pub answer_token_ids: Option<Vec<u32>>,
    pub output_probs: Option<Vec<f32>>,
    /// `[V][d]`, flattened. V is inferred from the length.
    pub unembedding: Option<Vec<f32>>,
    pub gt_mask: Option<Mask>,
    pub label: Option<bool>,
    pub metadata: TraceMetadata,
}

/// One recorded VQA example: per-layer patch and answer-token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTrace {
    header: TraceHeader,
    parts: TraceParts,
}

impl EmbeddingTrace {
    /// Validates `parts` and derives the header.
    pub fn new(parts: TraceParts) -> Result<Self> {
        let vocab = match &parts.unembedding {
            Some(u) => {
                if parts.dim == 0 || u.len() % parts.dim != 0 || u.is_empty() {
                    return Err(Error::invariant(
                        "unembedding",
                        "length must be a positive multiple of d",
                    ));
                }
                u.len() / parts.dim
            }
            None => 0,
        };
        let mut flags = TraceFlags::empty();
        flags.set(TraceFlags::HAS_UNEMBEDDING, parts.unembedding.is_some());
        flags.set(TraceFlags::HAS_OUTPUT_PROBS, parts.output_probs.is_some());
        flags.set(TraceFlags::HAS_GT_MASK, parts.gt_mask.is_some());
        flags.set(TraceFlags::HAS_LABEL, parts.label.is_some());
        let (mask_w, mask_h) = parts
            .gt_mask
            .as_ref()
            .map_or((0, 0), |m| (m.width, m.height));
        let header = TraceHeader {
            version: FORMAT_VERSION,
            layers: dim_u32("layers", parts.layers)?,
            dim: dim_u32("dim", parts.dim)?,
            width: dim_u32("width", parts.width)?,
            height: dim_u32("height", parts.height)?,
            tokens: dim_u32("tokens", parts.tokens)?,
            vocab: dim_u32("vocab", vocab)?,
            flags,
            mask_w: dim_u32("mask_w", mask_w)?,
            mask_h: dim_u32("mask_h", mask_h)?,
            label: u8::from(parts.label.unwrap_or(false)),
        };
        let trace = Self { header, parts };
        trace.validate()?;
        Ok(trace)
    }

    pub fn into_parts(self) -> TraceParts {
        self.parts
    }

    /// Re-checks every invariant. Traces built through [`EmbeddingTrace::new`]
    /// or parsed from bytes always pass.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        h.check()?;
        let p = &self.parts;
        if p.answer_token_ids.is_some() != p.unembedding.is_some() {
            return Err(Error::invariant(
                "answer_token_ids",
                "token ids and unembedding must be present together",
            ));
        }
        let (l, d, n, k) = (self.layers(), self.dim(), self.patches(), self.tokens());
        expect_len("patch_embeddings", p.patch_embeddings.len(), l * n * d)?;
        expect_len("answer_embeddings", p.answer_embeddings.len(), l * k * d)?;
        finite_or_invariant("patch_embeddings", &p.patch_embeddings)?;
        finite_or_invariant("answer_embeddings", &p.answer_embeddings)?;
        if let Some(ids) = &p.answer_token_ids {
            expect_len("answer_token_ids", ids.len(), k)?;
            if let Some(bad) = ids.iter().find(|&&id| id >= h.vocab) {
                return Err(Error::invariant(
                    "answer_token_ids",
                    format!("token id {bad} >= vocab size {}", h.vocab),
                ));
            }
        }
        if let Some(probs) = &p.output_probs {
            expect_len("output_probs", probs.len(), k)?;
            finite_or_invariant("output_probs", probs)?;
            if probs.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::invariant("output_probs", "values must lie in [0, 1]"));
            }
        }
        if let Some(u) = &p.unembedding {
            finite_or_invariant("unembedding", u)?;
        }
        if let Some(m) = &p.gt_mask {
            expect_len("gt_mask", m.data.len(), m.width * m.height)?;
        }
        if p.metadata.answer_token_strings.len() != k {
            return Err(Error::invariant(
                "metadata",
                format!(
                    "answer_token_strings has {} entries, expected {k}",
                    p.metadata.answer_token_strings.len()
                ),
            ));
        }
        if p.metadata.original_image_width == 0 || p.metadata.original_image_height == 0 {
            return Err(Error::invariant(
                "metadata",
                "original image dims must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn flags(&self) -> TraceFlags {
        self.header.flags
    }

    pub fn layers(&self) -> usize {
        self.header.layers as usize
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn width(&self) -> usize {
        self.header.width as usize
    }

    pub fn height(&self) -> usize {
        self.header.height as usize
    }

    pub fn patches(&self) -> usize {
        self.header.patches()
    }

    pub fn tokens(&self) -> usize {
        self.header.tokens as usize
    }

    pub fn vocab(&self) -> usize {
        self.header.vocab as usize
    }

    pub fn label(&self) -> Option<bool> {
        self.parts.label
    }

    pub fn metadata(&self) -> &TraceMetadata {
        &self.parts.metadata
    }

    /// `(width, height)` of the original image in pixels.
    pub fn image_dims(&self) -> (usize, usize) {
        let m = &self.parts.metadata;
        (
            m.original_image_width as usize,
            m.original_image_height as usize,
        )
    }

    /// Embedding of patch `j` (row-major, `j = y * W + x`) at `layer`.
    pub fn patch(&self, layer: usize, j: usize) -> &[f32] {
        let d = self.dim();
        let start = (layer * self.patches() + j) * d;
        &self.parts.patch_embeddings[start..start + d]
    }

    /// All patches at `layer`, `[n][d]` flattened.
    pub fn patch_layer(&self, layer: usize) -> &[f32] {
        let stride = self.patches() * self.dim();
        &self.parts.patch_embeddings[layer * stride..(layer + 1) * stride]
    }

    pub fn answer(&self, layer: usize, token: usize) -> &[f32] {
        let d = self.dim();
        let start = (layer * self.tokens() + token) * d;
        &self.parts.answer_embeddings[start..start + d]
    }

    pub fn patch_embeddings(&self) -> &[f32] {
        &self.parts.patch_embeddings
    }

    pub fn answer_embeddings(&self) -> &[f32] {
        &self.parts.answer_embeddings
    }

    pub fn answer_token_ids(&self) -> Option<&[u32]> {
        self.parts.answer_token_ids.as_deref()
    }

    pub fn output_probs(&self) -> Option<&[f32]> {
        self.parts.output_probs.as_deref()
    }

    pub fn unembedding(&self) -> Option<&[f32]> {
        self.parts.unembedding.as_deref()
    }

    /// Unembedding row for vocabulary id `v`.
    pub fn unembedding_row(&self, v: usize) -> Option<&[f32]> {
        let d = self.dim();
        self.parts
            .unembedding
            .as_deref()
            .map(|u| &u[v * d..(v + 1) * d])
    }

    pub fn gt_mask(&self) -> Option<&Mask> {
        self.parts.gt_mask.as_ref()
    }

    /// Serializes to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let h = &self.header;
        let p = &self.parts;
        let json = serde_json::to_vec(&p.metadata)
            .map_err(|e| Error::invariant("metadata", e.to_string()))?;
        let json_len = u32::try_from(json.len())
            .map_err(|_| Error::invariant("metadata", "JSON exceeds 4 GiB"))?;
        let body = h.body_len().expect("validated dims fit in u64") as usize;
        let mut out = Vec::with_capacity(body + 4 + json.len());
        out.extend_from_slice(&MAGIC);
        for v in [
            h.version,
            h.layers,
            h.dim,
            h.width,
            h.height,
            h.tokens,
            h.vocab,
            h.flags.bits(),
            h.mask_w,
            h.mask_h,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(h.label);
        out.extend_from_slice(&[0; 3]);
        put_f32s(&mut out, &p.patch_embeddings);
        put_f32s(&mut out, &p.answer_embeddings);
        if let Some(ids) = &p.answer_token_ids {
            for id in ids {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        if let Some(probs) = &p.output_probs {
            put_f32s(&mut out, probs);
        }
        if let Some(u) = &p.unembedding {
            put_f32s(&mut out, u);
        }
        if let Some(m) = &p.gt_mask {
            out.extend_from_slice(&m.data);
        }
        debug_assert_eq!(out.len(), body);
        out.extend_from_slice(&json_len.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    /// Parses and fully validates a trace. Never returns a partial trace.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(Error::TruncatedFile {
                expected: HEADER_LEN as u64,
                actual,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedFile {
                expected: HEADER_LEN as u64,
                actual,
            });
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u32();
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let layers = cur.u32();
        let dim = cur.u32();
        let width = cur.u32();
        let height = cur.u32();
        let tokens = cur.u32();
        let vocab = cur.u32();
        let raw_flags = cur.u32();
        let flags = TraceFlags::from_bits(raw_flags)
            .ok_or_else(|| Error::invariant("flags", format!("unknown bits in {raw_flags:#x}")))?;
        let mask_w = cur.u32();
        let mask_h = cur.u32();
        let label = cur.take(1)[0];
        if cur.take(3) != [0, 0, 0] {
            return Err(Error::invariant("padding", "header pad bytes must be zero"));
        }
        let header = TraceHeader {
            version,
            layers,
            dim,
            width,
            height,
            tokens,
            vocab,
            flags,
            mask_w,
            mask_h,
            label,
        };
        header.check()?;

        let body = header.body_len().unwrap_or(u64::MAX);
        let with_prefix = body.saturating_add(4);
        if actual < with_prefix {
            return Err(Error::TruncatedFile {
                expected: with_prefix,
                actual,
            });
        }
        let json_len = u32::from_le_bytes(
            bytes[body as usize..with_prefix as usize]
                .try_into()
                .unwrap(),
        );
        let expected = with_prefix + u64::from(json_len);
        if actual != expected {
            return Err(Error::TruncatedFile { expected, actual });
        }

        let (l, d, k) = (layers as usize, dim as usize, tokens as usize);
        let n = header.patches();
        let patch_embeddings = cur.f32s("patch_embeddings", l * n * d)?;
        let answer_embeddings = cur.f32s("answer_embeddings", l * k * d)?;
        let has_unembedding = flags.contains(TraceFlags::HAS_UNEMBEDDING);
        let answer_token_ids = has_unembedding.then(|| cur.u32s(k));
        let output_probs = if flags.contains(TraceFlags::HAS_OUTPUT_PROBS) {
            Some(cur.f32s("output_probs", k)?)
        } else {
            None
        };
        let unembedding = if has_unembedding {
            Some(cur.f32s("unembedding", vocab as usize * d)?)
        } else {
            None
        };
        let gt_mask = if flags.contains(TraceFlags::HAS_GT_MASK) {
            let (mw, mh) = (mask_w as usize, mask_h as usize);
            Some(Mask::new(mw, mh, cur.take(mw * mh).to_vec())?)
        } else {
            None
        };
        cur.pos += 4;
        let metadata: TraceMetadata = serde_json::from_slice(cur.take(json_len as usize))
            .map_err(|e| Error::invariant("metadata", e.to_string()))?;
        let parts = TraceParts {
            layers: l,
            dim: d,
            width: width as usize,
            height: height as usize,
            tokens: k,
            patch_embeddings,
            answer_embeddings,
            answer_token_ids,
            output_probs,
            unembedding,
            gt_mask,
            label: header.hallucinated(),
            metadata,
        };
        let trace = Self { header, parts };
        trace.validate()?;
        Ok(trace)
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<EmbeddingTrace> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTrace::from_bytes(&bytes)
}

pub fn write_trace(trace: &EmbeddingTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = trace.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dim_u32(field: &'static str, value: usize) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::invariant(field, "exceeds u32"))
}

fn expect_len(field: &'static str, actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::invariant(
            field,
            format!("expected {expected} elements, got {actual}"),
        ));
    }
    Ok(())
}

fn finite_or_invariant(field: &'static str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invariant(
            field,
            format!("non-finite value at flat index {i}"),
        )),
        None => Ok(()),
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reader over a buffer whose total length was already checked.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u32s(&mut self, count: usize) -> Vec<u32> {
        self.take(count * 4)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    fn f32s(&mut self, field: &'static str, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count * 4);
        let mut out = Vec::with_capacity(count);
        for (index, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { field, index });
            }
            out.push(v);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_parts() -> TraceParts {
        TraceParts {
            layers: 1,
            dim: 2,
            width: 1,
            height: 1,
            tokens: 1,
            patch_embeddings: vec![0.25, -1.5],
            answer_embeddings: vec![1.0, 2.0],
            answer_token_ids: None,
            output_probs: None,
            unembedding: None,
            gt_mask: None,
            label: None,
            metadata: TraceMetadata {
                question: "what?".into(),
                answer_text: "x".into(),
                answer_token_strings: vec!["x".into()],
                category: "other".into(),
                image_ref: None,
                original_image_width: 4,
                original_image_height: 4,
                extra: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn minimal_round_trip() {
        let t = EmbeddingTrace::new(minimal_parts()).unwrap();
        let bytes = t.to_bytes().unwrap();
        let back = EmbeddingTrace::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.patch(0, 0), &[0.25, -1.5]);
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut parts = minimal_parts();
        parts.label = Some(true);
        let bytes = EmbeddingTrace::new(parts).unwrap().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CLT1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[32..36].try_into().unwrap()), 8);
        assert_eq!(bytes[44], 1);
        assert_eq!(&bytes[45..48], &[0, 0, 0]);
        // header + 2 patch floats + 2 answer floats
        assert_eq!(
            u32::from_le_bytes(bytes[64..68].try_into().unwrap()) as usize,
            bytes.len() - 68
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = EmbeddingTrace::new(minimal_parts()).unwrap().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            EmbeddingTrace::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn one_float_short_is_truncated() {
        let bytes = EmbeddingTrace::new(minimal_parts()).unwrap().to_bytes().unwrap();
        // Drop the last patch float, keeping the trailing sections intact.
        let mut cut = bytes[..HEADER_LEN + 4].to_vec();
        cut.extend_from_slice(&bytes[HEADER_LEN + 8..]);
        assert!(matches!(
            EmbeddingTrace::from_bytes(&cut),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn nan_rejected_on_write_and_read() {
        let mut parts = minimal_parts();
        parts.patch_embeddings[1] = f32::NAN;
        assert!(matches!(
            EmbeddingTrace::new(parts),
            Err(Error::InvariantViolation { field: "patch_embeddings", .. })
        ));

        let mut bytes = EmbeddingTrace::new(minimal_parts()).unwrap().to_bytes().unwrap();
        bytes[HEADER_LEN + 4..HEADER_LEN + 8].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            EmbeddingTrace::from_bytes(&bytes),
            Err(Error::NonFiniteValue { field: "patch_embeddings", index: 1 })
        ));
    }

    #[test]
    fn token_ids_must_be_in_vocab() {
        let mut parts = minimal_parts();
        parts.unembedding = Some(vec![1.0, 0.0, 0.0, 1.0]);
        parts.answer_token_ids = Some(vec![2]);
        assert!(matches!(
            EmbeddingTrace::new(parts),
            Err(Error::InvariantViolation { field: "answer_token_ids", .. })
        ));
    }

    #[test]
    fn token_strings_must_match_k() {
        let mut parts = minimal_parts();
        parts.metadata.answer_token_strings.push("y".into());
        assert!(matches!(
            EmbeddingTrace::new(parts),
            Err(Error::InvariantViolation { field: "metadata", .. })
        ));
    }

    #[test]
    fn unknown_metadata_keys_survive() {
        let mut parts = minimal_parts();
        parts
            .metadata
            .extra
            .insert("model_id".into(), serde_json::json!("qwen2-vl"));
        let t = EmbeddingTrace::new(parts).unwrap();
        let back = EmbeddingTrace::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert_eq!(back.metadata().model_id(), Some("qwen2-vl"));
    }

    #[test]
    fn row_major_patch_index_is_bijective() {
        let (w, h) = (5, 3);
        let mut seen = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let j = y * w + x;
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }
}
