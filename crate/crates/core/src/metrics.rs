//! Lesion-wise Dice and 95% Hausdorff distance with false-positive
//! penalties, and dataset-level aggregation.

use std::fmt::Write as _;

use ndarray::{s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::components::{connected_components, Connectivity};
use crate::error::{Error, Result};
use crate::postprocess::TumorClass;

pub const DEFAULT_PENALTY: f64 = 374.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hd95Mode {
    /// One percentile over both directed distance sets together.
    #[default]
    Pooled,
    /// Larger of the two directed 95th percentiles.
    MaxDirected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub connectivity: Connectivity,
    /// Radius of the cube (26-connectivity) or diamond (6-connectivity)
    /// used to dilate ground-truth lesions before matching.
    pub dilation_radius: usize,
    pub penalty: f64,
    pub hd95_mode: Hd95Mode,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            connectivity: Connectivity::TwentySix,
            dilation_radius: 1,
            penalty: DEFAULT_PENALTY,
            hd95_mode: Hd95Mode::Pooled,
        }
    }
}

fn count(a: &Array3<bool>) -> usize {
    a.iter().filter(|&&v| v).count()
}

/// `2|a ∩ b| / (|a| + |b|)`, or 1 when both are empty.
pub fn dice(a: &Array3<bool>, b: &Array3<bool>) -> f64 {
    let (na, nb) = (count(a), count(b));
    if na + nb == 0 {
        return 1.0;
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    2.0 * inter as f64 / (na + nb) as f64
}

/// Set voxels with at least one face neighbour that is unset or outside
/// the volume.
pub fn surface(a: ArrayView3<bool>) -> Array3<bool> {
    let (d, h, w) = a.dim();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if !a[(z, y, x)] {
            return false;
        }
        let off = |v: usize, dv: isize, n: usize| {
            let t = v as isize + dv;
            (t >= 0 && (t as usize) < n).then_some(t as usize)
        };
        [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
            .iter()
            .any(|&(dz, dy, dx)| match (off(z, dz, d), off(y, dy, h), off(x, dx, w)) {
                (Some(nz), Some(ny), Some(nx)) => !a[(nz, ny, nx)],
                _ => true,
            })
    })
}

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas). `f` holds 0 at features and infinity elsewhere, or the
/// result of a previous pass.
fn edt_1d(f: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let mut k = 0;
    v[0] = sites[0];
    zb[0] = f64::NEG_INFINITY;
    zb[1] = f64::INFINITY;
    for &q in &sites[1..] {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= zb[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= zb[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                zb[0] = f64::NEG_INFINITY;
                zb[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            zb[k] = s;
            zb[k + 1] = f64::INFINITY;
            break;
        }
    }
    let values: Vec<f64> = f.to_vec();
    let mut j = 0;
    for (q, out) in f.iter_mut().enumerate() {
        while zb[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = q as f64 - p as f64;
        *out = dq * dq + values[p];
    }
}

/// Squared Euclidean distance from every voxel to the nearest `true` voxel
/// of `features`; infinity everywhere when there is none.
pub fn squared_edt(features: &Array3<bool>) -> Array3<f64> {
    let mut d = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    let longest = d.shape().iter().copied().max().unwrap_or(0);
    let mut v = vec![0usize; longest];
    let mut zb = vec![0.0; longest + 1];
    for axis in 0..3 {
        for mut lane in d.lanes_mut(Axis(axis)) {
            let mut buf: Vec<f64> = lane.to_vec();
            edt_1d(&mut buf, &mut v, &mut zb);
            lane.iter_mut().zip(buf).for_each(|(o, b)| *o = b);
        }
    }
    d
}

/// Linear-interpolation percentile of unsorted values.
fn percentile(mut values: Vec<f64>, q: f64) -> f64 {
    crate::volume::percentile(&mut values, q).unwrap_or(0.0)
}

/// Distances from every surface voxel of `from` to the surface of `to`.
fn directed_surface_distances(from_surface: &Array3<bool>, to_surface: &Array3<bool>) -> Vec<f64> {
    let dist = squared_edt(to_surface);
    from_surface
        .iter()
        .zip(dist.iter())
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Bounding box `(lo, hi)` (inclusive) of the union of two masks.
fn union_bbox(a: &Array3<bool>, b: &Array3<bool>) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (((z, y, x), &va), &vb) in a.indexed_iter().zip(b.iter()) {
        if va || vb {
            any = true;
            for (i, c) in [z, y, x].into_iter().enumerate() {
                lo[i] = lo[i].min(c);
                hi[i] = hi[i].max(c);
            }
        }
    }
    any.then_some((lo, hi))
}

/// 95th-percentile symmetric surface distance in voxel units. `None` when
/// either mask is empty.
pub fn hd95_with(a: &Array3<bool>, b: &Array3<bool>, mode: Hd95Mode) -> Option<f64> {
    if count(a) == 0 || count(b) == 0 {
        return None;
    }
    // everything lies inside the joint bounding box, so cropping is exact
    let (lo, hi) = union_bbox(a, b)?;
    let crop = |m: &Array3<bool>| m.slice(s![lo[0]..=hi[0], lo[1]..=hi[1], lo[2]..=hi[2]]).to_owned();
    let (ca, cb) = (crop(a), crop(b));
    // voxels just outside the crop are unset in both masks, as are voxels
    // outside the volume, so the surface is the same
    let (sa, sb) = (surface(ca.view()), surface(cb.view()));
    let ab = directed_surface_distances(&sa, &sb);
    let ba = directed_surface_distances(&sb, &sa);
    Some(match mode {
        Hd95Mode::Pooled => percentile(ab.into_iter().chain(ba).collect(), 95.0),
        Hd95Mode::MaxDirected => percentile(ab, 95.0).max(percentile(ba, 95.0)),
    })
}

pub fn hd95(a: &Array3<bool>, b: &Array3<bool>) -> Option<f64> {
    hd95_with(a, b, Hd95Mode::Pooled)
}

/// Dilation by a cube (26-connectivity) or L1 ball (6-connectivity).
pub fn dilate(mask: &Array3<bool>, radius: usize, connectivity: Connectivity) -> Array3<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let (d, h, w) = mask.dim();
    let r = radius as isize;
    let mut out = Array3::from_elem((d, h, w), false);
    for ((z, y, x), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if connectivity == Connectivity::Six && dz.abs() + dy.abs() + dx.abs() > r {
                        continue;
                    }
                    let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if nz >= 0 && ny >= 0 && nx >= 0 && (nz as usize) < d && (ny as usize) < h && (nx as usize) < w {
                        out[(nz as usize, ny as usize, nx as usize)] = true;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionMatch {
    pub gt_lesion: u32,
    pub matched_components: Vec<u32>,
    pub dice: f64,
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionResult {
    pub dice: f64,
    pub hd95: f64,
    pub n_lesions: usize,
    pub n_fp: usize,
    pub matches: Vec<LesionMatch>,
    pub fp_components: Vec<u32>,
}

/// Lesion-wise scores of one class in one sample.
pub fn lesionwise(gt: &Array3<bool>, pd: &Array3<bool>, cfg: &MetricConfig) -> Result<LesionResult> {
    if gt.dim() != pd.dim() {
        return Err(Error::shape(gt.dim(), pd.dim()));
    }
    let gt_cc = connected_components(gt, cfg.connectivity);
    let pd_cc = connected_components(pd, cfg.connectivity);
    let mut assigned = vec![false; pd_cc.count() + 1];
    let mut matches = Vec::with_capacity(gt_cc.count());
    for lesion in &gt_cc.stats {
        let gmask = gt_cc.mask(lesion.id);
        let grown = dilate(&gmask, cfg.dilation_radius, cfg.connectivity);
        let mut hit: Vec<u32> = grown
            .iter()
            .zip(pd_cc.labels.iter())
            .filter(|(&g, &p)| g && p != 0)
            .map(|(_, &p)| p)
            .collect();
        hit.sort_unstable();
        hit.dedup();
        let pmask = pd_cc.labels.mapv(|p| p != 0 && hit.binary_search(&p).is_ok());
        hit.iter().for_each(|&p| assigned[p as usize] = true);
        let hd = hd95_with(&gmask, &pmask, cfg.hd95_mode).map_or(cfg.penalty, |h| h.min(cfg.penalty));
        matches.push(LesionMatch {
            gt_lesion: lesion.id,
            matched_components: hit,
            dice: dice(&gmask, &pmask),
            hd95: hd,
        });
    }
    let fp_components: Vec<u32> = (1..=pd_cc.count() as u32).filter(|&p| !assigned[p as usize]).collect();
    let n = matches.len() + fp_components.len();
    let (dice, hd95) = if n == 0 {
        // nothing to find and nothing predicted
        (1.0, 0.0)
    } else {
        let dsum: f64 = matches.iter().map(|m| m.dice).sum();
        let hsum: f64 = matches.iter().map(|m| m.hd95).sum::<f64>() + cfg.penalty * fp_components.len() as f64;
        (dsum / n as f64, hsum / n as f64)
    };
    Ok(LesionResult {
        dice,
        hd95,
        n_lesions: matches.len(),
        n_fp: fp_components.len(),
        matches,
        fp_components,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    /// Indexed like [`TumorClass::ALL`].
    pub classes: Vec<(TumorClass, LesionResult)>,
}

pub const CSV_HEADER: &str = "sample_id,class,lesionwise_dice,lesionwise_hd95,n_lesions,n_fp";

pub fn metrics_csv(samples: &[SampleMetrics]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for s in samples {
        for (cls, r) in &s.classes {
            let _ = writeln!(out, "{},{},{},{},{},{}", s.sample_id, cls.name(), r.dice, r.hd95, r.n_lesions, r.n_fp);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: TumorClass,
    pub dice_mean: f64,
    pub dice_median: f64,
    pub hd95_mean: f64,
    pub hd95_median: f64,
    pub n_samples: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and median per class over samples.
pub fn aggregate(samples: &[SampleMetrics]) -> Result<Vec<ClassSummary>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("nothing to aggregate".into()));
    }
    Ok(TumorClass::ALL
        .iter()
        .map(|&cls| {
            let pick = |f: fn(&LesionResult) -> f64| -> Vec<f64> {
                samples
                    .iter()
                    .flat_map(|s| s.classes.iter().filter(|(c, _)| *c == cls).map(|(_, r)| f(r)))
                    .collect()
            };
            let (d, h) = (pick(|r| r.dice), pick(|r| r.hd95));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            ClassSummary {
                class: cls,
                dice_mean: mean(&d),
                dice_median: if d.is_empty() { f64::NAN } else { median(d.clone()) },
                hd95_mean: mean(&h),
                hd95_median: if h.is_empty() { f64::NAN } else { median(h.clone()) },
                n_samples: d.len(),
            }
        })
        .collect())
}

pub fn summary_csv(summary: &[ClassSummary]) -> String {
    let mut out = String::from("class,dice_mean,dice_median,hd95_mean,hd95_median,n_samples\n");
    for c in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.class.name(),
            c.dice_mean,
            c.dice_median,
            c.hd95_mean,
            c.hd95_median,
            c.n_samples
        );
    }
    out
}

/// Text table with Mean and Median rows per metric and one column per
/// class.
pub fn summary_table(title: &str, summary: &[ClassSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<8} {:<7}", "Metric", "Stat");
    for c in summary {
        let _ = write!(out, " {:>8}", c.class.name());
    }
    out.push('\n');
    let rows: [(&str, &str, fn(&ClassSummary) -> f64); 4] = [
        ("D_lw", "Mean", |c| c.dice_mean),
        ("D_lw", "Median", |c| c.dice_median),
        ("H95_lw", "Mean", |c| c.hd95_mean),
        ("H95_lw", "Median", |c| c.hd95_median),
    ];
    for (metric, stat, f) in rows {
        let _ = write!(out, "{metric:<8} {stat:<7}");
        for c in summary {
            let _ = write!(out, " {:>8.3}", f(c));
        }
        out.push('\n');
    }
    out
}

/// Per-class histogram of one lesion-wise score over `bins` equal bins of
/// `[0, upper]`; values at or above `upper` land in the last bin.
pub fn histogram_csv(samples: &[SampleMetrics], bins: usize, upper: f64, score: fn(&LesionResult) -> f64) -> String {
    let bins = bins.max(1);
    let mut out = String::from("class,bin_lo,bin_hi,count\n");
    for cls in TumorClass::ALL {
        let mut counts = vec![0usize; bins];
        for s in samples {
            for (c, r) in &s.classes {
                if *c == cls {
                    let b = (score(r) / upper * bins as f64).max(0.0) as usize;
                    counts[b.min(bins - 1)] += 1;
                }
            }
        }
        for (i, n) in counts.iter().enumerate() {
            let width = upper / bins as f64;
            let _ = writeln!(out, "{},{},{},{}", cls.name(), i as f64 * width, (i + 1) as f64 * width, n);
        }
    }
    out
}

pub fn dice_histogram_csv(samples: &[SampleMetrics], bins: usize) -> String {
    histogram_csv(samples, bins, 1.0, |r| r.dice)
}

pub fn hd95_histogram_csv(samples: &[SampleMetrics], bins: usize, penalty: f64) -> String {
    histogram_csv(samples, bins, penalty, |r| r.hd95)
}
