//! The TKB1 bundle container, CSV matrix import, and the report writer.
//!
//! A TKB1 file is laid out as
//!
//! ```text
//! "TKB1" | header_len: u64 LE | header: UTF-8 JSON (header_len bytes) | payload
//! ```
//!
//! The header lists every tensor with its name, shape and byte offset into
//! the payload. Tensors are little-endian `f32`, row-major. `tokens` and
//! `cls` are required; `text`, `proj_w` and `proj_b` are optional. The header
//! may also carry `original_indices` (default `0..N`), a patch `grid` and a
//! string `metadata` map.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::types::{validate_bundle, CompressionReport, Matrix, ParamsUsed, ProjectionMap, TokenBundle};

pub const MAGIC: &[u8; 4] = b"TKB1";
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

fn default_dtype() -> String {
    "f32".into()
}

impl TensorEntry {
    fn byte_len(&self) -> Option<u64> {
        self.shape.iter().try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// Serializes a bundle into TKB1 bytes.
pub fn encode_bundle(bundle: &TokenBundle) -> Result<Vec<u8>> {
    let cls = bundle.cls.as_deref().ok_or(Error::MissingCls)?;
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, data: &[f32]| {
        tensors.push(TensorEntry { name: name.into(), dtype: default_dtype(), shape, offset: payload.len() as u64 });
        for x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    };
    push("tokens", vec![bundle.tokens.rows(), bundle.tokens.cols()], bundle.tokens.as_slice());
    push("cls", vec![cls.len()], cls);
    if let Some(text) = &bundle.text {
        push("text", vec![text.len()], text);
    }
    if let Some(p) = &bundle.proj {
        push("proj_w", vec![p.weight.rows(), p.weight.cols()], p.weight.as_slice());
        if let Some(b) = &p.bias {
            push("proj_b", vec![b.len()], b);
        }
    }
    let default_idx = bundle.original_indices.iter().copied().eq(0..bundle.len());
    let header = BundleHeader {
        tensors,
        original_indices: (!default_idx).then(|| bundle.original_indices.clone()),
        grid: bundle.grid,
        metadata: bundle.metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses TKB1 bytes into a validated bundle.
pub fn decode_bundle(bytes: &[u8]) -> Result<TokenBundle> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload(format!("{} bytes, no room for magic", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::TruncatedPayload("missing header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[4..PREAMBLE].try_into().expect("8 bytes"));
    let rest = (bytes.len() - PREAMBLE) as u64;
    if header_len > rest {
        return Err(Error::TruncatedPayload(format!("header declares {header_len} bytes, {rest} available")));
    }
    let header_end = PREAMBLE + header_len as usize;
    let header: BundleHeader =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    check_spans(&header.tensors, payload.len() as u64)?;

    let mut found: BTreeMap<&str, (&TensorEntry, Vec<f32>)> = BTreeMap::new();
    for t in &header.tensors {
        if !matches!(t.name.as_str(), "tokens" | "cls" | "text" | "proj_w" | "proj_b") {
            return Err(Error::MalformedHeader(format!("unknown tensor {:?}", t.name)));
        }
        if t.dtype != "f32" {
            return Err(Error::MalformedHeader(format!("tensor {:?} has dtype {:?}, expected f32", t.name, t.dtype)));
        }
        let start = t.offset as usize;
        let end = start + t.byte_len().expect("checked") as usize;
        let data =
            payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if found.insert(t.name.as_str(), (t, data)).is_some() {
            return Err(Error::MalformedHeader(format!("tensor {:?} listed twice", t.name)));
        }
    }

    let mut take = |name: &str, rank: usize| -> Result<Option<(Vec<usize>, Vec<f32>)>> {
        match found.remove(name) {
            None => Ok(None),
            Some((t, data)) if t.shape.len() == rank => Ok(Some((t.shape.clone(), data))),
            Some((t, _)) => {
                Err(Error::MalformedHeader(format!("tensor {name:?} has rank {}, expected {rank}", t.shape.len())))
            }
        }
    };
    let (tshape, tdata) =
        take("tokens", 2)?.ok_or_else(|| Error::MalformedHeader("missing tensor \"tokens\"".into()))?;
    let (_, cls) = take("cls", 1)?.ok_or_else(|| Error::MalformedHeader("missing tensor \"cls\"".into()))?;
    let text = take("text", 1)?.map(|(_, d)| d);
    let proj_w = take("proj_w", 2)?;
    let proj_b = take("proj_b", 1)?.map(|(_, d)| d);

    let tokens = Matrix::new(tshape[0], tshape[1], tdata)?;
    let proj = match (proj_w, proj_b) {
        (Some((s, w)), b) => Some(ProjectionMap::new(Matrix::new(s[0], s[1], w)?, b)?),
        (None, Some(_)) => return Err(Error::MalformedHeader("proj_b without proj_w".into())),
        (None, None) => None,
    };
    let n = tokens.rows();
    let bundle = TokenBundle {
        tokens,
        cls: Some(cls),
        text,
        proj,
        original_indices: header.original_indices.unwrap_or_else(|| (0..n).collect()),
        grid: header.grid,
        metadata: header.metadata,
    };
    validate_bundle(&bundle)?;
    if !bundle.original_indices.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidIndices("original indices in a file must be strictly increasing".into()));
    }
    Ok(bundle)
}

fn check_spans(tensors: &[TensorEntry], payload_len: u64) -> Result<()> {
    let mut spans = Vec::with_capacity(tensors.len());
    for t in tensors {
        let len = t.byte_len().ok_or_else(|| Error::MalformedHeader(format!("tensor {:?} is too large", t.name)))?;
        let end = t
            .offset
            .checked_add(len)
            .ok_or_else(|| Error::MalformedHeader(format!("tensor {:?} span overflows", t.name)))?;
        if end > payload_len {
            return Err(Error::TruncatedPayload(format!(
                "tensor {:?} spans bytes {}..{end} of a {payload_len}-byte payload",
                t.name, t.offset
            )));
        }
        spans.push((t.offset, end, t.name.as_str()));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::MalformedHeader(format!("tensors {:?} and {:?} overlap", w[0].2, w[1].2)));
        }
    }
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<TokenBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

pub fn write_bundle(bundle: &TokenBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundle(bundle)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses comma-separated rows of numbers into a matrix. No quoting, no
/// header row.
pub fn parse_csv_matrix(input: impl Read) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .quoting(false)
        .from_reader(input);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::MalformedHeader(format!("CSV: {e}")))?;
        let expected = *cols.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRows { row, expected, found: record.len() });
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f32 = cell.parse().map_err(|_| Error::NonNumericCell { row, col, cell: cell.to_string() })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or(Error::EmptyInput)?;
    Matrix::new(rows, cols, data)
}

pub fn read_csv_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv_matrix(file)
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    n_input: usize,
    n_visual_kept: usize,
    n_text_recovered: usize,
    n_merged: usize,
    n_output: usize,
    retention_ratio: f64,
    flops_before: Option<Box<RawValue>>,
    flops_after: Option<Box<RawValue>>,
    wall_time: Option<f64>,
    params_used: &'a ParamsUsed,
}

/// Scientific notation with six significant digits, e.g. `8.45123e12`.
pub fn sci6(x: f64) -> String {
    format!("{x:.5e}")
}

/// Renders a report as pretty-printed JSON with a fixed key order.
pub fn render_report(report: &CompressionReport) -> Result<String> {
    let raw = |x: Option<f64>| -> Result<Option<Box<RawValue>>> {
        x.map(|v| RawValue::from_string(sci6(v)).map_err(|e| Error::MalformedHeader(e.to_string()))).transpose()
    };
    let doc = ReportDoc {
        n_input: report.n_input,
        n_visual_kept: report.n_visual_kept,
        n_text_recovered: report.n_text_recovered,
        n_merged: report.n_merged,
        n_output: report.n_visual_kept + report.n_text_recovered + report.n_merged,
        retention_ratio: report.retention_ratio,
        flops_before: raw(report.flops_before)?,
        flops_after: raw(report.flops_after)?,
        wall_time: report.wall_time,
        params_used: &report.params_used,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_report(report: &CompressionReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_report(report)?).map_err(|e| Error::io(path, e))
}
