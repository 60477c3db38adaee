//! On-disk dataset: a JSON-lines manifest plus an adjacent `.bin` blob of
//! little-endian fp64 pixels. The first manifest line is a header; each
//! following line describes one sample and carries a CRC32 over its own
//! canonical JSON (without the `crc32` field) followed by its pixel bytes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dataset, FaceBox, ManipSet, Role, Sample};

const FORMAT: &str = "manipdet-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch in record {0}")]
    Checksum(String),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

impl DatasetIoError {
    pub fn code(&self) -> u32 {
        match self {
            DatasetIoError::Io(_) => 200,
            DatasetIoError::VersionMismatch { .. } => 201,
            DatasetIoError::Truncated(_) => 202,
            DatasetIoError::Checksum(_) => 203,
            DatasetIoError::Malformed(_) => 204,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    role: Role,
    width: usize,
    height: usize,
    /// Byte offset of the pixels in the blob.
    offset: u64,
    tokens: Vec<u32>,
    face_box: FaceBox,
    label_binary: u8,
    label_multi: ManipSet,
    grounding_mask: Vec<u8>,
    counterpart_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    crc32: Option<u32>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn checksum(record: &Record, pixels: &[u8]) -> u32 {
    let canonical = serde_json::to_vec(record).expect("record serializes");
    let mut h = crc32fast::Hasher::new();
    h.update(&canonical);
    h.update(pixels);
    h.finalize()
}

/// Writes `dataset` to `path` (manifest) and its `.bin` sibling.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetIoError> {
    if blob_path(path) == path {
        return Err(DatasetIoError::Malformed(format!(
            "manifest {} would collide with its blob",
            path.display()
        )));
    }
    let mut manifest = BufWriter::new(fs::File::create(path)?);
    let mut blob = BufWriter::new(fs::File::create(blob_path(path))?);
    let header = Header {
        format: FORMAT.into(),
        version: DATASET_VERSION,
        count: dataset.len(),
    };
    serde_json::to_writer(&mut manifest, &header).map_err(|e| DatasetIoError::Malformed(e.to_string()))?;
    manifest.write_all(b"\n")?;
    let mut offset = 0u64;
    for s in &dataset.samples {
        let pixels: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut rec = Record {
            id: s.id.clone(),
            role: s.role,
            width: s.width,
            height: s.height,
            offset,
            tokens: s.tokens.clone(),
            face_box: s.face_box,
            label_binary: s.label_binary,
            label_multi: s.label_multi,
            grounding_mask: s.grounding_mask.clone(),
            counterpart_id: s.counterpart_id.clone(),
            crc32: None,
        };
        rec.crc32 = Some(checksum(&rec, &pixels));
        serde_json::to_writer(&mut manifest, &rec).map_err(|e| DatasetIoError::Malformed(e.to_string()))?;
        manifest.write_all(b"\n")?;
        blob.write_all(&pixels)?;
        offset += pixels.len() as u64;
    }
    manifest.flush()?;
    blob.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetIoError> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| DatasetIoError::Truncated("missing header".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| DatasetIoError::Malformed(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(DatasetIoError::Malformed(format!("unknown format {:?}", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(DatasetIoError::VersionMismatch {
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let blob = fs::read(blob_path(path))?;
    let mut samples = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: Record = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) if e.is_eof() => return Err(DatasetIoError::Truncated(format!("record {}", samples.len()))),
            Err(e) => return Err(DatasetIoError::Malformed(e.to_string())),
        };
        let stored = rec
            .crc32
            .take()
            .ok_or_else(|| DatasetIoError::Malformed(format!("{}: no checksum", rec.id)))?;
        let n = rec
            .width
            .checked_mul(rec.height)
            .and_then(|p| p.checked_mul(8))
            .ok_or_else(|| DatasetIoError::Malformed(format!("{}: image size", rec.id)))?;
        let start = rec.offset as usize;
        let end = start
            .checked_add(n)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| DatasetIoError::Truncated(format!("pixels of {}", rec.id)))?;
        let pixels = &blob[start..end];
        if checksum(&rec, pixels) != stored {
            return Err(DatasetIoError::Checksum(rec.id));
        }
        samples.push(Sample {
            id: rec.id,
            role: rec.role,
            width: rec.width,
            height: rec.height,
            image: pixels
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            tokens: rec.tokens,
            face_box: rec.face_box,
            label_binary: rec.label_binary,
            label_multi: rec.label_multi,
            grounding_mask: rec.grounding_mask,
            counterpart_id: rec.counterpart_id,
        });
    }
    if samples.len() < header.count {
        return Err(DatasetIoError::Truncated(format!(
            "{} of {} records",
            samples.len(),
            header.count
        )));
    }
    if samples.len() > header.count {
        return Err(DatasetIoError::Malformed(format!(
            "{} records, header says {}",
            samples.len(),
            header.count
        )));
    }
    Ok(Dataset { samples })
}
