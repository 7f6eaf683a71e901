//! Portable volume format: a JSON sidecar next to a little-endian blob.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, MultiModalVolume, LABEL_LEGEND, MODALITIES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    /// `[C, D, H, W]` for images, `[D, H, W]` for labels.
    pub dims: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
    /// Blob file name, relative to the sidecar.
    pub data_file: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_legend: Vec<(u8, String)>,
}

fn blob_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("bin")
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_pair(sidecar: &Path, header: &RawHeader, blob: &[u8]) -> Result<()> {
    fs::write(sidecar, serde_json::to_string_pretty(header)?)?;
    fs::write(blob_path(sidecar), blob)?;
    Ok(())
}

fn read_pair(sidecar: &Path, dtype: &str, rank: usize, width: usize) -> Result<(RawHeader, Vec<u8>)> {
    let header: RawHeader = serde_json::from_str(&fs::read_to_string(sidecar)?)
        .map_err(|e| format_err(sidecar, e.to_string()))?;
    if header.dtype != dtype || header.dims.len() != rank || header.byte_order != "little" {
        return Err(format_err(
            sidecar,
            format!("expected {dtype} rank {rank} little-endian, found {} rank {} {}", header.dtype, header.dims.len(), header.byte_order),
        ));
    }
    let blob_file = sidecar.parent().unwrap_or(Path::new(".")).join(&header.data_file);
    let blob = fs::read(&blob_file)?;
    let expected = header.dims.iter().product::<usize>() * width;
    if blob.len() != expected {
        return Err(format_err(&blob_file, format!("{} bytes, expected {expected}", blob.len())));
    }
    Ok((header, blob))
}

/// Writes `sidecar` (JSON) and the float32 blob beside it (`.bin`).
pub fn write_raw_volume(sidecar: &Path, vol: &MultiModalVolume) -> Result<()> {
    let (c, d, h, w) = vol.dim();
    let header = RawHeader {
        dims: vec![c, d, h, w],
        dtype: "float32".into(),
        byte_order: "little".into(),
        data_file: file_name(&blob_path(sidecar)),
        channels: MODALITIES.iter().map(|s| s.to_string()).collect(),
        label_legend: Vec::new(),
    };
    let blob: Vec<u8> = vol.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_pair(sidecar, &header, &blob)
}

pub fn read_raw_volume(sidecar: &Path) -> Result<MultiModalVolume> {
    let (header, blob) = read_pair(sidecar, "float32", 4, 4)?;
    let data: Vec<f64> = blob
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let d = &header.dims;
    let arr = Array4::from_shape_vec((d[0], d[1], d[2], d[3]), data).map_err(|e| format_err(sidecar, e.to_string()))?;
    MultiModalVolume::new(arr)
}

pub fn write_raw_labels(sidecar: &Path, labels: &LabelVolume) -> Result<()> {
    let (d, h, w) = labels.dim();
    let header = RawHeader {
        dims: vec![d, h, w],
        dtype: "uint8".into(),
        byte_order: "little".into(),
        data_file: file_name(&blob_path(sidecar)),
        channels: Vec::new(),
        label_legend: LABEL_LEGEND.iter().map(|&(v, n)| (v, n.to_string())).collect(),
    };
    let blob: Vec<u8> = labels.data().iter().copied().collect();
    write_pair(sidecar, &header, &blob)
}

pub fn read_raw_labels(sidecar: &Path) -> Result<LabelVolume> {
    let (header, blob) = read_pair(sidecar, "uint8", 3, 1)?;
    let d = &header.dims;
    let arr = Array3::from_shape_vec((d[0], d[1], d[2]), blob).map_err(|e| format_err(sidecar, e.to_string()))?;
    LabelVolume::new(arr)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
