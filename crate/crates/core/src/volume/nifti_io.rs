//! NIfTI-1 reading and writing. NIfTI arrays are indexed `[x, y, z]`; the
//! crate's volumes are `(depth, height, width)` = `(z, y, x)`.

use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, Axis, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use super::{LabelVolume, MultiModalVolume};
use crate::error::{Error, Result};

fn read_array(path: &Path) -> Result<ArrayD<f64>> {
    let obj = ReaderOptions::new().read_file(path)?;
    Ok(obj.into_volume().into_ndarray::<f64>()?)
}

fn to_zyx(path: &Path, a: ArrayD<f64>) -> Result<Array3<f64>> {
    let a = a.into_dimensionality::<Ix3>().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "expected a 3D volume".into(),
    })?;
    Ok(a.reversed_axes().as_standard_layout().into_owned())
}

/// Loads either one 4D file holding the four modalities along its last axis
/// or four 3D files in modality order.
pub fn load_nifti_modalities(paths: &[&Path]) -> Result<MultiModalVolume> {
    let channels: Vec<Array3<f64>> = match paths {
        [single] => {
            let a = read_array(single)?;
            if a.ndim() != 4 || a.shape()[3] != 4 {
                return Err(Error::Format {
                    path: single.to_path_buf(),
                    reason: format!("expected shape [x, y, z, 4], found {:?}", a.shape()),
                });
            }
            a.axis_iter(Axis(3))
                .map(|c| to_zyx(single, c.to_owned()))
                .collect::<Result<_>>()?
        }
        [_, _, _, _] => paths.iter().map(|p| read_array(p).and_then(|a| to_zyx(p, a))).collect::<Result<_>>()?,
        _ => return Err(Error::InvalidInput(format!("need 1 or 4 NIfTI files, got {}", paths.len()))),
    };
    let dim = channels[0].dim();
    if let Some(bad) = channels.iter().find(|c| c.dim() != dim) {
        return Err(Error::shape(dim, bad.dim()));
    }
    let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
    let stacked: Array4<f64> = ndarray::stack(Axis(0), &views).expect("equal shapes");
    MultiModalVolume::new(stacked)
}

pub fn load_nifti_labels(path: &Path) -> Result<LabelVolume> {
    let a = to_zyx(path, read_array(path)?)?;
    if let Some(bad) = a.iter().find(|v| !(0.0..=255.0).contains(*v) || v.fract() != 0.0) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("non-integer label value {bad}"),
        });
    }
    LabelVolume::new(a.mapv(|v| v as u8))
}

/// Writes labels as a uint8 NIfTI; `.nii.gz` paths are gzip compressed.
pub fn write_nifti_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let xyz = labels.data().view().reversed_axes();
    WriterOptions::new(path).write_nifti(&xyz.as_standard_layout())?;
    Ok(())
}
