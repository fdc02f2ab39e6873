//! JSONL and sidecar-binary file helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::BBox;

/// Reads one JSON object per non-blank line. Errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, records: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Contextual entity embeddings for one image-caption pair; row `i` belongs
/// to entity `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub entity_embeddings: Vec<Vec<f64>>,
}

/// Cached outputs of an image-text matching model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub image_id: String,
    pub proposal_embeddings: Vec<Vec<f64>>,
    pub entity_prompt_embeddings: Vec<Vec<f64>>,
}

/// Known entity-to-proposal alignment, used only for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub image_id: String,
    pub proposals: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BBox<f64>,
    pub label: String,
}

/// Localized ground-truth scene graph for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_id: String,
    pub objects: Vec<GtObject>,
    pub relations: Vec<(usize, String, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BulkHeader<H> {
    dtype: String,
    records: Vec<BulkEntry<H>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BulkEntry<H> {
    #[serde(flatten)]
    meta: H,
    offset: usize,
    len: usize,
}

/// Writes `(meta, values)` pairs as a little-endian `f32` stream at `bin`
/// plus a JSON header at `header` listing element offsets.
pub fn write_bulk<H: Serialize>(header: &Path, bin: &Path, records: &[(H, &[f64])]) -> Result<()> {
    let mut w = create(bin)?;
    let mut entries = Vec::with_capacity(records.len());
    let mut offset = 0;
    for (meta, values) in records {
        for v in values.iter() {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(|e| Error::io(bin, e))?;
        }
        entries.push(BulkEntry {
            meta,
            offset,
            len: values.len(),
        });
        offset += values.len();
    }
    w.flush().map_err(|e| Error::io(bin, e))?;
    write_json(
        header,
        &BulkHeader {
            dtype: "f32".into(),
            records: entries,
        },
    )
}

pub fn read_bulk<H: DeserializeOwned>(header: &Path, bin: &Path) -> Result<Vec<(H, Vec<f64>)>> {
    let head: BulkHeader<H> = read_json(header)?;
    let width = match head.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => {
            return Err(Error::Parse {
                path: header.to_path_buf(),
                line: 1,
                reason: format!("unsupported dtype {other}"),
            })
        }
    };
    let mut bytes = Vec::new();
    File::open(bin)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(bin, e))?;
    let mut out = Vec::with_capacity(head.records.len());
    for (i, entry) in head.records.into_iter().enumerate() {
        let start = entry.offset * width;
        let end = start + entry.len * width;
        let chunk = bytes.get(start..end).ok_or_else(|| Error::Parse {
            path: header.to_path_buf(),
            line: i + 1,
            reason: "record extends past end of stream".into(),
        })?;
        let values = if width == 4 {
            chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        } else {
            chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        };
        out.push((entry.meta, values));
    }
    Ok(out)
}
