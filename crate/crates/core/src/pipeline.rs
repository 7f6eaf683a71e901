//! Glue between raw volumes on disk and the networks: preprocessing,
//! zero-padding to the generator's spatial multiple, and the inverse on
//! the way out.

use ndarray::{s, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::components::Connectivity;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::postprocess::{postprocess, FilterThresholds, PostprocessOutput};
use crate::training::TrainSample;
use crate::volume::{
    preprocess, resize_array, resize_labels, LabelVolume, MultiModalVolume, PreprocessConfig, ProbabilityMask, ResizeKind,
};

/// In-plane sizes a volume goes through on its way into the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub native_hw: (usize, usize),
    pub resized_hw: (usize, usize),
    pub padded_hw: (usize, usize),
}

impl InputGeometry {
    pub fn was_padded(&self) -> bool {
        self.padded_hw != self.resized_hw
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Zero-pads the bottom and right of every slice up to `hw`.
pub fn pad_channels(a: &Array4<f64>, hw: (usize, usize)) -> Array4<f64> {
    let (c, d, h, w) = a.dim();
    let mut out = Array4::zeros((c, d, hw.0.max(h), hw.1.max(w)));
    out.slice_mut(s![.., .., ..h, ..w]).assign(a);
    out
}

pub fn pad_labels(a: &Array3<u8>, hw: (usize, usize)) -> Array3<u8> {
    let (d, h, w) = a.dim();
    let mut out = Array3::zeros((d, hw.0.max(h), hw.1.max(w)));
    out.slice_mut(s![.., ..h, ..w]).assign(a);
    out
}

/// Normalizes, resizes and pads `vol` so its in-plane size is a multiple
/// of `multiple`.
pub fn prepare_input(vol: &MultiModalVolume, pre: &PreprocessConfig, multiple: usize) -> Result<(MultiModalVolume, InputGeometry)> {
    if multiple == 0 {
        return Err(Error::Config("spatial multiple must be positive".into()));
    }
    let (_, _, h, w) = vol.dim();
    let x = preprocess(vol, pre)?;
    let (_, _, rh, rw) = x.dim();
    let padded_hw = (round_up(rh, multiple), round_up(rw, multiple));
    let geometry = InputGeometry {
        native_hw: (h, w),
        resized_hw: (rh, rw),
        padded_hw,
    };
    let x = if geometry.was_padded() {
        MultiModalVolume::new(pad_channels(x.data(), padded_hw))?
    } else {
        x
    };
    Ok((x, geometry))
}

/// Generator probabilities at the volume's native size.
pub fn predict_probabilities(gen: &Generator, vol: &MultiModalVolume, pre: &PreprocessConfig) -> Result<(ProbabilityMask, InputGeometry)> {
    let (x, geometry) = prepare_input(vol, pre, gen.config.spatial_multiple())?;
    let pd = gen.forward(&x)?;
    let (rh, rw) = geometry.resized_hw;
    let cropped = pd.data().slice(s![.., .., ..rh, ..rw]).to_owned();
    let native = if geometry.native_hw == geometry.resized_hw {
        cropped
    } else {
        resize_array(&cropped, geometry.native_hw, ResizeKind::Image)?.mapv(|v| v.clamp(0.0, 1.0))
    };
    Ok((ProbabilityMask::new(native)?, geometry))
}

/// Forward pass followed by the full post-processing chain.
pub fn predict_labels(
    gen: &Generator,
    vol: &MultiModalVolume,
    pre: &PreprocessConfig,
    thresholds: &FilterThresholds,
    connectivity: Connectivity,
) -> Result<(PostprocessOutput, InputGeometry)> {
    let (pd, geometry) = predict_probabilities(gen, vol, pre)?;
    Ok((postprocess(&pd, thresholds, connectivity), geometry))
}

/// Training pair in network geometry: image and labels resized and padded
/// the same way.
pub fn prepare_training_sample(
    id: impl Into<String>,
    vol: &MultiModalVolume,
    labels: &LabelVolume,
    pre: &PreprocessConfig,
    multiple: usize,
) -> Result<TrainSample> {
    let (_, d, h, w) = vol.dim();
    if labels.dim() != (d, h, w) {
        return Err(Error::shape((d, h, w), labels.dim()));
    }
    let (x, geometry) = prepare_input(vol, pre, multiple)?;
    let resized = match pre.target_hw {
        Some(hw) if hw != (h, w) => resize_labels(labels, hw)?,
        _ => labels.clone(),
    };
    let labels = LabelVolume::new(pad_labels(resized.data(), geometry.padded_hw))?;
    TrainSample::new(id, x, &labels)
}
