//! PATS binary trace container.
//!
//! One container carries every tensor the toolkit exchanges: vision-encoder
//! attention, patch-token feature dumps, and decoder attention. Layout:
//!
//! ```text
//! "PATS" | version: u32 LE | header_len: u32 LE | header: UTF-8 JSON | payload: f32 LE
//! ```
//!
//! The payload is row-major float32. Each named section records its byte
//! offset (relative to the first payload byte) and shape in the header's
//! `sections` map. Unknown header keys are ignored on read.
//!
//! Section layouts:
//!
//! | kind               | storage       | section         | shape              |
//! |--------------------|---------------|-----------------|--------------------|
//! | `vision_attention` | `full`        | `attention`     | `[L, H, N, N]`     |
//! | `vision_attention` | `cls_reduced` | `cls_attention` | `[L, H, N]`        |
//! | `features`         | `full`        | `features`      | `[patches, C]`     |
//! | `decoder_attention`| `full`        | `attention`     | `[T, L, H, N]`     |
//!
//! When `has_cls` is set the CLS token sits at token index 0.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PATS";
pub const FORMAT_VERSION: u32 = 1;
/// Maximum allowed deviation of an attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
const MAX_WARNINGS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    VisionAttention,
    DecoderAttention,
    Features,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::VisionAttention => "vision_attention",
            TraceKind::DecoderAttention => "decoder_attention",
            TraceKind::Features => "features",
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    #[default]
    Full,
    ClsReduced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub offset: u64,
    pub shape: Vec<usize>,
}

impl Section {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Self-describing container header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub kind: TraceKind,
    pub model_id: String,
    #[serde(rename = "L")]
    pub num_layers: usize,
    #[serde(rename = "H")]
    pub num_heads: usize,
    #[serde(rename = "N_total")]
    pub num_tokens: usize,
    pub has_cls: bool,
    pub storage: Storage,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    /// Half-open `[start, end)` token interval of image tokens in the decoder context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_span: Option<[usize; 2]>,
    /// Number of generated tokens (decoder traces).
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub num_generated: Option<usize>,
    pub layer_ids: Vec<usize>,
    #[serde(default)]
    pub sections: BTreeMap<String, Section>,
}

impl TraceHeader {
    /// Header for a vision-encoder attention trace.
    pub fn vision(
        model_id: impl Into<String>,
        layer_ids: Vec<usize>,
        num_heads: usize,
        num_tokens: usize,
        has_cls: bool,
        storage: Storage,
    ) -> Self {
        TraceHeader {
            kind: TraceKind::VisionAttention,
            model_id: model_id.into(),
            num_layers: layer_ids.len(),
            num_heads,
            num_tokens,
            has_cls,
            storage,
            feature_dim: None,
            visual_span: None,
            num_generated: None,
            layer_ids,
            sections: BTreeMap::new(),
        }
    }

    /// Header for a patch-token feature dump taken at `source_layer`.
    pub fn features(
        model_id: impl Into<String>,
        source_layer: usize,
        num_tokens: usize,
        has_cls: bool,
        feature_dim: usize,
    ) -> Self {
        TraceHeader {
            kind: TraceKind::Features,
            model_id: model_id.into(),
            num_layers: 1,
            num_heads: 1,
            num_tokens,
            has_cls,
            storage: Storage::Full,
            feature_dim: Some(feature_dim),
            visual_span: None,
            num_generated: None,
            layer_ids: vec![source_layer],
            sections: BTreeMap::new(),
        }
    }

    /// Header for a decoder attention trace over a context of `context_len` tokens.
    pub fn decoder(
        model_id: impl Into<String>,
        layer_ids: Vec<usize>,
        num_heads: usize,
        context_len: usize,
        visual_span: [usize; 2],
        num_generated: usize,
    ) -> Self {
        TraceHeader {
            kind: TraceKind::DecoderAttention,
            model_id: model_id.into(),
            num_layers: layer_ids.len(),
            num_heads,
            num_tokens: context_len,
            has_cls: false,
            storage: Storage::Full,
            feature_dim: None,
            visual_span: Some(visual_span),
            num_generated: Some(num_generated),
            layer_ids,
            sections: BTreeMap::new(),
        }
    }

    /// Number of patch tokens (excludes CLS).
    pub fn num_patches(&self) -> usize {
        self.num_tokens - usize::from(self.has_cls)
    }

    pub fn cls_index(&self) -> Option<usize> {
        self.has_cls.then_some(0)
    }

    /// Position of an absolute layer id within `layer_ids`.
    pub fn layer_position(&self, layer: usize) -> Result<usize> {
        self.layer_ids
            .binary_search(&layer)
            .map_err(|_| Error::LayerNotFound(layer))
    }

    /// Checks the structural invariants of the header.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidHeader(msg));
        if self.num_layers == 0 || self.num_heads == 0 {
            return bad(format!(
                "L and H must be >= 1 (L={}, H={})",
                self.num_layers, self.num_heads
            ));
        }
        if self.num_tokens < 2 {
            return bad(format!("N_total must be >= 2, got {}", self.num_tokens));
        }
        if self.storage == Storage::ClsReduced {
            if !self.has_cls {
                return bad("cls_reduced storage requires has_cls = true".into());
            }
            if self.kind != TraceKind::VisionAttention {
                return bad("cls_reduced storage is only valid for vision_attention".into());
            }
        }
        if self.layer_ids.len() != self.num_layers {
            return bad(format!(
                "layer_ids has {} entries, L = {}",
                self.layer_ids.len(),
                self.num_layers
            ));
        }
        if self.layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return bad("layer_ids must be strictly increasing".into());
        }
        match (self.kind, self.visual_span) {
            (TraceKind::DecoderAttention, Some([start, end])) => {
                if start >= end || end > self.num_tokens {
                    return bad(format!(
                        "visual_span [{start}, {end}) invalid for context length {}",
                        self.num_tokens
                    ));
                }
            }
            (TraceKind::DecoderAttention, None) => {
                return bad("decoder_attention requires visual_span".into());
            }
            (_, Some(_)) => return bad("visual_span is only valid for decoder_attention".into()),
            (_, None) => {}
        }
        match self.kind {
            TraceKind::Features => match self.feature_dim {
                Some(c) if c >= 1 => {}
                _ => return bad("features kind requires C >= 1".into()),
            },
            TraceKind::DecoderAttention => match self.num_generated {
                Some(t) if t >= 1 => {}
                _ => return bad("decoder_attention requires T >= 1".into()),
            },
            TraceKind::VisionAttention => {}
        }
        Ok(())
    }

    /// The single payload section implied by the header's dimensions.
    pub fn expected_section(&self) -> (&'static str, Vec<usize>) {
        let (l, h, n) = (self.num_layers, self.num_heads, self.num_tokens);
        match (self.kind, self.storage) {
            (TraceKind::VisionAttention, Storage::Full) => ("attention", vec![l, h, n, n]),
            (TraceKind::VisionAttention, Storage::ClsReduced) => ("cls_attention", vec![l, h, n]),
            (TraceKind::Features, _) => (
                "features",
                vec![self.num_patches(), self.feature_dim.unwrap_or(0)],
            ),
            (TraceKind::DecoderAttention, _) => (
                "attention",
                vec![self.num_generated.unwrap_or(0), l, h, n],
            ),
        }
    }

    fn expected_len(&self) -> usize {
        self.expected_section().1.iter().product()
    }

    fn with_sections(&self) -> TraceHeader {
        let (name, shape) = self.expected_section();
        let mut header = self.clone();
        header.sections = BTreeMap::from([(name.to_string(), Section { offset: 0, shape })]);
        header
    }
}

fn check_payload(header: &TraceHeader, len: usize) -> Result<()> {
    header.validate()?;
    let expected = header.expected_len();
    if expected != len {
        return Err(Error::ShapeMismatch(format!(
            "{} header implies {} values, payload has {}",
            header.kind, expected, len
        )));
    }
    Ok(())
}

/// Per-layer, per-head attention of a vision encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    header: TraceHeader,
    data: Vec<f32>,
}

impl AttentionTrace {
    pub fn new(header: TraceHeader, data: Vec<f32>) -> Result<Self> {
        expect_kind(&header, TraceKind::VisionAttention)?;
        check_payload(&header, data.len())?;
        Ok(AttentionTrace {
            header: header.with_sections(),
            data,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.header.num_heads
    }

    pub fn num_tokens(&self) -> usize {
        self.header.num_tokens
    }

    pub fn is_full(&self) -> bool {
        self.header.storage == Storage::Full
    }

    fn check_index(&self, pos: usize, head: usize) -> Result<()> {
        if pos >= self.header.num_layers || head >= self.header.num_heads {
            return Err(Error::OutOfRange(format!(
                "layer position {pos}, head {head} (L={}, H={})",
                self.header.num_layers, self.header.num_heads
            )));
        }
        Ok(())
    }

    /// Full `N_total x N_total` attention matrix (row-major) at a layer position.
    pub fn matrix(&self, pos: usize, head: usize) -> Result<&[f32]> {
        if !self.is_full() {
            return Err(Error::ClsReducedStorage);
        }
        self.check_index(pos, head)?;
        let n = self.header.num_tokens;
        let start = (pos * self.header.num_heads + head) * n * n;
        Ok(&self.data[start..start + n * n])
    }

    /// Attention row of the CLS query at a layer position.
    pub fn cls_row(&self, pos: usize, head: usize) -> Result<&[f32]> {
        if !self.header.has_cls {
            return Err(Error::NoClsToken);
        }
        self.check_index(pos, head)?;
        let n = self.header.num_tokens;
        match self.header.storage {
            Storage::Full => Ok(&self.matrix(pos, head)?[..n]),
            Storage::ClsReduced => {
                let start = (pos * self.header.num_heads + head) * n;
                Ok(&self.data[start..start + n])
            }
        }
    }

    fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.header.num_tokens)
    }
}

/// Patch-token embeddings captured at one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    header: TraceHeader,
    data: Vec<f32>,
}

impl FeatureDump {
    pub fn new(header: TraceHeader, data: Vec<f32>) -> Result<Self> {
        expect_kind(&header, TraceKind::Features)?;
        check_payload(&header, data.len())?;
        Ok(FeatureDump {
            header: header.with_sections(),
            data,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn source_layer(&self) -> usize {
        self.header.layer_ids[0]
    }

    pub fn num_rows(&self) -> usize {
        self.header.num_patches()
    }

    pub fn dim(&self) -> usize {
        self.header.feature_dim.unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim())
    }
}

/// Decoder attention rows per generated token, layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    header: TraceHeader,
    data: Vec<f32>,
}

impl DecoderTrace {
    pub fn new(header: TraceHeader, data: Vec<f32>) -> Result<Self> {
        expect_kind(&header, TraceKind::DecoderAttention)?;
        check_payload(&header, data.len())?;
        Ok(DecoderTrace {
            header: header.with_sections(),
            data,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn num_generated(&self) -> usize {
        self.header.num_generated.unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.header.num_heads
    }

    pub fn context_len(&self) -> usize {
        self.header.num_tokens
    }

    pub fn visual_span(&self) -> [usize; 2] {
        self.header.visual_span.unwrap_or([0, 0])
    }

    /// Attention row of generated token `k` at a layer position and head.
    pub fn row(&self, k: usize, pos: usize, head: usize) -> Result<&[f32]> {
        let (t, l, h) = (self.num_generated(), self.num_layers(), self.num_heads());
        if k >= t || pos >= l || head >= h {
            return Err(Error::OutOfRange(format!(
                "token {k}, layer position {pos}, head {head} (T={t}, L={l}, H={h})"
            )));
        }
        let n = self.context_len();
        let start = ((k * l + pos) * h + head) * n;
        Ok(&self.data[start..start + n])
    }
}

fn expect_kind(header: &TraceHeader, kind: TraceKind) -> Result<()> {
    if header.kind != kind {
        return Err(Error::WrongKind {
            expected: kind.as_str(),
            found: header.kind.as_str(),
        });
    }
    Ok(())
}

/// Any object storable in a PATS container.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceFile {
    Vision(AttentionTrace),
    Features(FeatureDump),
    Decoder(DecoderTrace),
}

impl TraceFile {
    pub fn header(&self) -> &TraceHeader {
        match self {
            TraceFile::Vision(t) => &t.header,
            TraceFile::Features(f) => &f.header,
            TraceFile::Decoder(d) => &d.header,
        }
    }

    pub fn data(&self) -> &[f32] {
        match self {
            TraceFile::Vision(t) => &t.data,
            TraceFile::Features(f) => &f.data,
            TraceFile::Decoder(d) => &d.data,
        }
    }

    pub fn kind(&self) -> TraceKind {
        self.header().kind
    }

    pub fn into_vision(self) -> Result<AttentionTrace> {
        match self {
            TraceFile::Vision(t) => Ok(t),
            other => Err(wrong(TraceKind::VisionAttention, other.kind())),
        }
    }

    pub fn into_features(self) -> Result<FeatureDump> {
        match self {
            TraceFile::Features(f) => Ok(f),
            other => Err(wrong(TraceKind::Features, other.kind())),
        }
    }

    pub fn into_decoder(self) -> Result<DecoderTrace> {
        match self {
            TraceFile::Decoder(d) => Ok(d),
            other => Err(wrong(TraceKind::DecoderAttention, other.kind())),
        }
    }
}

fn wrong(expected: TraceKind, found: TraceKind) -> Error {
    Error::WrongKind {
        expected: expected.as_str(),
        found: found.as_str(),
    }
}

impl From<AttentionTrace> for TraceFile {
    fn from(t: AttentionTrace) -> Self {
        TraceFile::Vision(t)
    }
}

impl From<FeatureDump> for TraceFile {
    fn from(f: FeatureDump) -> Self {
        TraceFile::Features(f)
    }
}

impl From<DecoderTrace> for TraceFile {
    fn from(d: DecoderTrace) -> Self {
        TraceFile::Decoder(d)
    }
}

/// Non-fatal validation finding produced when reading in lenient mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationWarning {
    pub kind: &'static str,
    pub message: String,
}

/// A decoded container plus any lenient-mode warnings.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub trace: TraceFile,
    pub warnings: Vec<ValidationWarning>,
}

/// Serializes a container to bytes.
pub fn encode(trace: &TraceFile) -> Result<Vec<u8>> {
    let data = trace.data();
    check_payload(trace.header(), data.len())?;
    let header = trace.header().with_sections();
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::InvalidHeader("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a container from bytes, validating the payload.
///
/// Attention rows must be nonnegative and sum to 1 within
/// [`ROW_SUM_TOLERANCE`]; with `strict` a violation is an error, otherwise it
/// is reported as a warning. Non-finite values are always errors.
pub fn decode(bytes: &[u8], strict: bool) -> Result<Loaded> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if &magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Truncated {
            expected: payload_start,
            found: bytes.len(),
        });
    }
    let header: TraceHeader = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| Error::InvalidHeader(e.to_string()))?;
    header.validate()?;

    let (name, shape) = header.expected_section();
    let section = header
        .sections
        .get(name)
        .ok_or_else(|| Error::InvalidHeader(format!("missing section {name:?}")))?;
    if section.shape != shape {
        return Err(Error::ShapeMismatch(format!(
            "section {name:?} has shape {:?}, header implies {shape:?}",
            section.shape
        )));
    }
    let start = payload_start
        .checked_add(section.offset as usize)
        .ok_or_else(|| Error::InvalidHeader("section offset overflow".into()))?;
    let end = start + section.len() * 4;
    if bytes.len() < end {
        return Err(Error::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            section: name.to_string(),
            index,
        });
    }

    let mut warnings = Vec::new();
    let trace = match header.kind {
        TraceKind::VisionAttention => TraceFile::Vision(AttentionTrace::new(header, data)?),
        TraceKind::Features => TraceFile::Features(FeatureDump::new(header, data)?),
        TraceKind::DecoderAttention => TraceFile::Decoder(DecoderTrace::new(header, data)?),
    };
    match &trace {
        TraceFile::Vision(t) => check_rows(name, t.rows(), strict, &mut warnings)?,
        TraceFile::Decoder(d) => check_rows(
            name,
            d.data.chunks_exact(d.context_len()),
            strict,
            &mut warnings,
        )?,
        TraceFile::Features(f) => {
            let zero_rows = f.rows().filter(|r| r.iter().all(|&v| v == 0.0)).count();
            if zero_rows > 0 {
                warnings.push(ValidationWarning {
                    kind: "ZeroFeatureRows",
                    message: format!("{zero_rows} all-zero feature rows"),
                });
            }
        }
    }
    Ok(Loaded { trace, warnings })
}

fn check_rows<'a>(
    section: &str,
    rows: impl Iterator<Item = &'a [f32]>,
    strict: bool,
    warnings: &mut Vec<ValidationWarning>,
) -> Result<()> {
    let mut bad = 0usize;
    for (row, values) in rows.enumerate() {
        if let Some((index, &v)) = values.iter().enumerate().find(|(_, v)| **v < 0.0) {
            if strict {
                return Err(Error::NegativeProbability {
                    index,
                    value: v as f64,
                });
            }
            bad += 1;
            if bad <= MAX_WARNINGS {
                warnings.push(ValidationWarning {
                    kind: "NegativeProbability",
                    message: format!("{section} row {row} has negative entry {v} at {index}"),
                });
            }
            continue;
        }
        let sum: f64 = values.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            if strict {
                return Err(Error::RowSumOutOfTolerance {
                    section: section.to_string(),
                    row,
                    sum,
                    tol: ROW_SUM_TOLERANCE,
                });
            }
            bad += 1;
            if bad <= MAX_WARNINGS {
                warnings.push(ValidationWarning {
                    kind: "RowSumOutOfTolerance",
                    message: format!("{section} row {row} sums to {sum:.6}"),
                });
            }
        }
    }
    if bad > MAX_WARNINGS {
        warnings.push(ValidationWarning {
            kind: "WarningsTruncated",
            message: format!("{} further invalid rows not listed", bad - MAX_WARNINGS),
        });
    }
    Ok(())
}

/// Writes a container to `path`.
pub fn write_trace(path: impl AsRef<Path>, trace: &TraceFile) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(trace)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and validates a container from `path`.
pub fn read_trace(path: impl AsRef<Path>, strict: bool) -> Result<Loaded> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, strict)
}
