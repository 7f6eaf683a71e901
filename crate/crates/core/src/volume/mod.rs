//! Multi-modal MRI volumes, label cubes, and the preprocessing applied
//! before they reach the generator.

mod nifti_io;
mod phantom;
mod raw;
mod split;

pub use nifti_io::{load_nifti_labels, load_nifti_modalities, write_nifti_labels};
pub use phantom::{make_phantom, PhantomSpec};
pub use raw::{read_raw_labels, read_raw_volume, write_raw_labels, write_raw_volume, RawHeader};
pub use split::split_dataset;

use ndarray::{s, Array3, Array4, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Modality order of the four channels.
pub const MODALITIES: [&str; 4] = ["t1", "t2", "t1ce", "flair"];

/// Voxel label meanings.
pub const LABEL_LEGEND: [(u8, &str); 4] = [(0, "background"), (1, "NC"), (2, "ED"), (3, "ET")];

/// Four-channel image cube laid out `(channel, depth, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    data: Array4<f64>,
}

impl MultiModalVolume {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (c, d, h, w) = data.dim();
        if c != 4 || d == 0 || h == 0 || w == 0 {
            return Err(Error::shape("(4, D>=1, H>=1, W>=1)", data.dim()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("volume contains NaN or Inf".into()));
        }
        Ok(MultiModalVolume { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    /// `[D, C, H, W]` network layout.
    pub fn to_tensor(&self) -> Tensor {
        channels_to_tensor(&self.data)
    }
}

/// Integer segmentation cube `(depth, height, width)` with labels 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    data: Array3<u8>,
}

impl LabelVolume {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|&&v| v > 3) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(LabelVolume { data })
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn into_data(self) -> Array3<u8> {
        self.data
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Voxel count per label 0..=3.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        self.data.iter().for_each(|&v| h[v as usize] += 1);
        h
    }
}

/// One-hot target `(3, depth, height, width)`; channel k marks label k+1.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotTarget {
    data: Array4<f64>,
}

impl OneHotTarget {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::shape("(3, D, H, W)", data.dim()));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput("one-hot values must be 0 or 1".into()));
        }
        Ok(OneHotTarget { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        channels_to_tensor(&self.data)
    }
}

/// Per-class probabilities `(classes, depth, height, width)` in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMask {
    data: Array4<f64>,
}

impl ProbabilityMask {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
        }
        Ok(ProbabilityMask { data })
    }

    /// From the network layout `[D, K, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(tensor_to_channels(t))
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn to_tensor(&self) -> Tensor {
        channels_to_tensor(&self.data)
    }
}

/// `(C, D, H, W)` array to `[D, C, H, W]` tensor.
pub fn channels_to_tensor(a: &Array4<f64>) -> Tensor {
    let (c, d, h, w) = a.dim();
    let data: Vec<f64> = a.view().permuted_axes([1, 0, 2, 3]).iter().copied().collect();
    Tensor::new(vec![d, c, h, w], data).expect("element count")
}

/// `[D, C, H, W]` tensor to `(C, D, H, W)` array.
pub fn tensor_to_channels(t: &Tensor) -> Array4<f64> {
    let (d, c, h, w) = t.dims4();
    let a = Array4::from_shape_vec((d, c, h, w), t.data().to_vec()).expect("element count");
    a.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// In-plane size after resizing; `None` keeps the native size.
    pub target_hw: Option<(usize, usize)>,
    pub noise_mu: f64,
    pub noise_sigma: f64,
    pub percentile: f64,
    /// Compute the percentile over nonzero voxels only.
    pub percentile_nonzero_only: bool,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_hw: Some((256, 256)),
            noise_mu: 0.0,
            noise_sigma: 0.1,
            percentile: 99.0,
            percentile_nonzero_only: false,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::Config(format!("percentile {} outside (0, 100]", self.percentile)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma {} is negative", self.noise_sigma)));
        }
        if let Some((h, w)) = self.target_hw {
            if h < 8 || w < 8 {
                return Err(Error::Config(format!("target size {h}x{w} below 8x8")));
            }
        }
        Ok(())
    }
}

/// Linear-interpolation percentile (`q` in [0, 100]) of `values`; the slice
/// is reordered.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut lo_v, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return Some(lo_v);
    }
    let hi_v = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Some(lo_v + frac * (hi_v - lo_v))
}

/// Divides each channel by its `cfg.percentile` voxel value.
pub fn normalize_channels(vol: &MultiModalVolume, cfg: &PreprocessConfig) -> Result<MultiModalVolume> {
    let mut data = vol.data.clone();
    for (channel, mut plane) in data.axis_iter_mut(Axis(0)).enumerate() {
        let mut values: Vec<f64> = if cfg.percentile_nonzero_only {
            plane.iter().copied().filter(|&v| v != 0.0).collect()
        } else {
            plane.iter().copied().collect()
        };
        let divisor = percentile(&mut values, cfg.percentile).unwrap_or(0.0);
        if !(divisor > 0.0) {
            return Err(Error::DegenerateChannel { channel, divisor });
        }
        plane.mapv_inplace(|v| v / divisor);
    }
    MultiModalVolume::new(data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeKind {
    /// Bilinear interpolation.
    Image,
    /// Nearest neighbour; label values are preserved.
    Mask,
}

fn source_coord(dst: usize, scale: f64) -> f64 {
    (dst as f64 + 0.5) * scale - 0.5
}

fn resize_plane(src: ndarray::ArrayView2<f64>, out: &mut ndarray::ArrayViewMut2<f64>, kind: ResizeKind) {
    let (h, w) = src.dim();
    let (th, tw) = out.dim();
    let (sy, sx) = (h as f64 / th as f64, w as f64 / tw as f64);
    match kind {
        ResizeKind::Mask => {
            for ((y, x), v) in out.indexed_iter_mut() {
                let iy = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
                let ix = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
                *v = src[(iy, ix)];
            }
        }
        ResizeKind::Image => {
            let taps = |dst: usize, scale: f64, len: usize| {
                let c = source_coord(dst, scale).clamp(0.0, (len - 1) as f64);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, c - lo as f64)
            };
            for ((y, x), v) in out.indexed_iter_mut() {
                let (y0, y1, fy) = taps(y, sy, h);
                let (x0, x1, fx) = taps(x, sx, w);
                let top = src[(y0, x0)] * (1.0 - fx) + src[(y0, x1)] * fx;
                let bottom = src[(y1, x0)] * (1.0 - fx) + src[(y1, x1)] * fx;
                *v = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
}

/// Resizes every `(H, W)` slice of a `(C, D, H, W)` array; depth untouched.
pub fn resize_array(a: &Array4<f64>, target_hw: (usize, usize), kind: ResizeKind) -> Result<Array4<f64>> {
    let (c, d, h, w) = a.dim();
    let (th, tw) = target_hw;
    if th < 8 || tw < 8 {
        return Err(Error::InvalidInput(format!("target size {th}x{tw} below 8x8")));
    }
    if (h, w) == (th, tw) {
        return Ok(a.clone());
    }
    let mut out = Array4::zeros((c, d, th, tw));
    for ci in 0..c {
        for z in 0..d {
            let mut dst = out.slice_mut(s![ci, z, .., ..]);
            resize_plane(a.slice(s![ci, z, .., ..]), &mut dst, kind);
        }
    }
    Ok(out)
}

pub fn resize_volume(vol: &MultiModalVolume, target_hw: (usize, usize)) -> Result<MultiModalVolume> {
    MultiModalVolume::new(resize_array(&vol.data, target_hw, ResizeKind::Image)?)
}

pub fn resize_labels(labels: &LabelVolume, target_hw: (usize, usize)) -> Result<LabelVolume> {
    let a = labels.data.mapv(f64::from).insert_axis(Axis(0));
    let r = resize_array(&a, target_hw, ResizeKind::Mask)?;
    LabelVolume::new(r.index_axis_move(Axis(0), 0).mapv(|v| v as u8))
}

/// Adds `N(mu, sigma^2)` to every voxel greater than zero.
pub fn add_foreground_noise(vol: &MultiModalVolume, mu: f64, sigma: f64, seed: u64) -> Result<MultiModalVolume> {
    if sigma == 0.0 && mu == 0.0 {
        return Ok(vol.clone());
    }
    let normal = Normal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vol.data.clone();
    data.iter_mut().filter(|v| **v > 0.0).for_each(|v| *v += normal.sample(&mut rng));
    MultiModalVolume::new(data)
}

/// Per-sample seed stream: mixes the global seed with the sample index and
/// an epoch counter.
pub fn sample_seed(global_seed: u64, sample_index: u64, epoch: u64) -> u64 {
    global_seed ^ sample_index ^ epoch.rotate_left(32)
}

/// Normalization followed by the optional resize.
pub fn preprocess(vol: &MultiModalVolume, cfg: &PreprocessConfig) -> Result<MultiModalVolume> {
    cfg.validate()?;
    let norm = normalize_channels(vol, cfg)?;
    match cfg.target_hw {
        Some(hw) => resize_volume(&norm, hw),
        None => Ok(norm),
    }
}

pub fn one_hot_encode(labels: &LabelVolume) -> OneHotTarget {
    let (d, h, w) = labels.dim();
    let mut data = Array4::zeros((3, d, h, w));
    for ((z, y, x), &l) in labels.data.indexed_iter() {
        if l > 0 {
            data[(l as usize - 1, z, y, x)] = 1.0;
        }
    }
    OneHotTarget { data }
}

/// Inverse of [`one_hot_encode`]; fails when a voxel marks two classes.
pub fn decode_one_hot(target: &OneHotTarget) -> Result<LabelVolume> {
    let (_, d, h, w) = target.data.dim();
    let mut labels = Array3::<u8>::zeros((d, h, w));
    let mut clash = false;
    Zip::indexed(&mut labels).for_each(|(z, y, x), l| {
        for k in 0..3 {
            if target.data[(k, z, y, x)] == 1.0 {
                clash |= *l != 0;
                *l = k as u8 + 1;
            }
        }
    });
    if clash {
        return Err(Error::InvalidInput("one-hot voxel marks more than one class".into()));
    }
    LabelVolume::new(labels)
}
