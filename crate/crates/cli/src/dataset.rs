//! On-disk sample collections: a directory holding `manifest.json` plus the
//! volume files it names.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tcupgan_core::volume::{
    load_nifti_labels, load_nifti_modalities, read_raw_labels, read_raw_volume, write_nifti_labels, write_raw_labels,
    write_raw_volume, LabelVolume, MultiModalVolume,
};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    /// One raw sidecar, one 4D NIfTI, or four 3D NIfTI files in modality
    /// order. Empty for prediction sets.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    /// Per-class binaries (WT, TC, ET) written by `predict`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<[String; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<Entry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut ids: Vec<&str> = m.samples.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            bail!(tcupgan_core::Error::InvalidInput(format!("duplicate sample id '{}' in {}", w[0], path.display())));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Entry> {
        self.samples.iter().find(|e| e.id == id)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    /// JSON sidecar plus a little-endian binary blob.
    #[default]
    Raw,
    /// Gzipped NIfTI-1.
    Nifti,
}

impl VolumeFormat {
    pub fn file_name(self, stem: &str) -> String {
        match self {
            VolumeFormat::Raw => format!("{stem}.json"),
            VolumeFormat::Nifti => format!("{stem}.nii.gz"),
        }
    }
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

pub fn load_image(dir: &Path, files: &[String]) -> Result<MultiModalVolume> {
    let paths: Vec<PathBuf> = files.iter().map(|f| dir.join(f)).collect();
    let vol = match paths.as_slice() {
        [] => bail!(tcupgan_core::Error::InvalidInput("sample lists no image files".into())),
        [one] if !is_nifti(one) => read_raw_volume(one)?,
        _ => load_nifti_modalities(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
    };
    Ok(vol)
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    Ok(if is_nifti(path) {
        load_nifti_labels(path)?
    } else {
        read_raw_labels(path)?
    })
}

pub fn save_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    if is_nifti(path) {
        write_nifti_labels(path, labels)?;
    } else {
        write_raw_labels(path, labels)?;
    }
    Ok(())
}

pub fn save_image(path: &Path, vol: &MultiModalVolume) -> Result<()> {
    write_raw_volume(path, vol)?;
    Ok(())
}

/// A fully loaded sample.
pub struct Sample {
    pub id: String,
    pub image: MultiModalVolume,
    pub labels: Option<LabelVolume>,
}

pub fn load_samples(dir: &Path, need_labels: bool) -> Result<Vec<Sample>> {
    let manifest = Manifest::read(dir)?;
    if manifest.samples.is_empty() {
        bail!(tcupgan_core::Error::InvalidInput(format!("{} lists no samples", dir.join(MANIFEST).display())));
    }
    manifest
        .samples
        .iter()
        .map(|e| {
            let image = load_image(dir, &e.images).with_context(|| format!("loading image of {}", e.id))?;
            let labels = match &e.labels {
                Some(f) => Some(load_labels(&dir.join(f)).with_context(|| format!("loading labels of {}", e.id))?),
                None if need_labels => bail!(tcupgan_core::Error::InvalidInput(format!("sample {} has no labels", e.id))),
                None => None,
            };
            Ok(Sample {
                id: e.id.clone(),
                image,
                labels,
            })
        })
        .collect()
}
