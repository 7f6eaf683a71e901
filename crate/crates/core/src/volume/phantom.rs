//! Synthetic nested-ellipsoid "tumours" inside an ellipsoidal head, used as
//! a stand-in for real scans in tests and demos.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, MultiModalVolume};
use crate::error::{Error, Result};

/// Base intensity per channel (t1, t2, t1ce, flair) for
/// healthy tissue, NC, ED and ET in that order.
const INTENSITY: [[f64; 4]; 4] = [
    [60.0, 30.0, 45.0, 70.0],
    [50.0, 85.0, 100.0, 60.0],
    [55.0, 30.0, 50.0, 130.0],
    [40.0, 65.0, 115.0, 80.0],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// `(D, H, W)`.
    pub dims: (usize, usize, usize),
    /// `(rz, ry, rx)` of the ET core, NC region and ED region. A zero radius
    /// leaves that region empty.
    pub radii_et: (f64, f64, f64),
    pub radii_nc: (f64, f64, f64),
    pub radii_ed: (f64, f64, f64),
    /// Maximum random in-plane shift of the tumour centre, in voxels. The
    /// shift is clamped so the tumour stays inside the volume.
    pub center_jitter: f64,
    /// Relative standard deviation of the multiplicative intensity noise.
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: (8, 32, 32),
            radii_et: (2.2, 3.0, 3.0),
            radii_nc: (2.8, 6.0, 6.0),
            radii_ed: (3.5, 10.0, 10.0),
            center_jitter: 2.0,
            noise: 0.03,
        }
    }
}

impl PhantomSpec {
    /// Isotropic radii for ET, NC and ED in a `dims` cube.
    pub fn spherical(dims: (usize, usize, usize), radii: [f64; 3]) -> Self {
        let r = |v: f64| (v, v, v);
        PhantomSpec {
            dims,
            radii_et: r(radii[0]),
            radii_nc: r(radii[1]),
            radii_ed: r(radii[2]),
            ..Default::default()
        }
    }

    fn regions(&self) -> [(u8, (f64, f64, f64)); 3] {
        // drawn outermost first so inner regions overwrite
        [(2, self.radii_ed), (1, self.radii_nc), (3, self.radii_et)]
    }
}

fn inside(p: (f64, f64, f64), c: (f64, f64, f64), r: (f64, f64, f64)) -> bool {
    if r.0 <= 0.0 || r.1 <= 0.0 || r.2 <= 0.0 {
        return false;
    }
    let q = ((p.0 - c.0) / r.0).powi(2) + ((p.1 - c.1) / r.1).powi(2) + ((p.2 - c.2) / r.2).powi(2);
    q <= 1.0
}

pub fn make_phantom(spec: &PhantomSpec, seed: u64) -> Result<(MultiModalVolume, LabelVolume)> {
    let (d, h, w) = spec.dims;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("phantom dims {:?} must be positive", spec.dims)));
    }
    let mid = ((d - 1) as f64 / 2.0, (h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let limits = [(d - 1) as f64, (h - 1) as f64, (w - 1) as f64];
    let tol = 1e-9;
    for (label, r) in spec.regions() {
        let r = [r.0, r.1, r.2];
        let c = [mid.0, mid.1, mid.2];
        if r.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput(format!("negative radius for label {label}")));
        }
        if (0..3).any(|a| c[a] - r[a] < -tol || c[a] + r[a] > limits[a] + tol) {
            return Err(Error::OutOfBounds(format!(
                "label {label} ellipsoid radii {r:?} exceed volume {:?}",
                spec.dims
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outer = spec.radii_ed;
    let jitter = |rng: &mut ChaCha8Rng, centre: f64, radius: f64, limit: f64| {
        let slack = (centre - radius).min(limit - centre - radius).max(0.0).min(spec.center_jitter);
        if slack > 0.0 {
            centre + rng.gen_range(-slack..=slack)
        } else {
            centre
        }
    };
    let centre = (
        mid.0,
        jitter(&mut rng, mid.1, outer.1, limits[1]),
        jitter(&mut rng, mid.2, outer.2, limits[2]),
    );
    // the head fills the volume so every tumour voxel is also head tissue
    let head_r = (d as f64 / 2.0 + 0.5, h as f64 / 2.0 + 0.5, w as f64 / 2.0 + 0.5);

    let mut labels = Array3::<u8>::zeros((d, h, w));
    let mut head = Array3::<bool>::from_elem((d, h, w), false);
    for ((z, y, x), l) in labels.indexed_iter_mut() {
        let p = (z as f64, y as f64, x as f64);
        head[(z, y, x)] = inside(p, mid, head_r);
        for (label, r) in spec.regions() {
            if inside(p, centre, r) {
                *l = label;
            }
        }
    }

    let phases: Vec<[f64; 3]> = (0..4)
        .map(|_| [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)])
        .collect();
    let normal = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Array4::<f64>::zeros((4, d, h, w));
    for c in 0..4 {
        let ph = phases[c];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let l = labels[(z, y, x)];
                    if !head[(z, y, x)] && l == 0 {
                        continue;
                    }
                    let base = INTENSITY[c][l as usize];
                    let smooth = 1.0
                        + 0.05 * (0.3 * x as f64 + ph[0]).sin()
                        + 0.05 * (0.25 * y as f64 + ph[1]).cos()
                        + 0.03 * (0.5 * z as f64 + ph[2]).sin();
                    let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    data[(c, z, y, x)] = (base * smooth * (1.0 + noise)).max(1.0);
                }
            }
        }
    }
    Ok((MultiModalVolume::new(data)?, LabelVolume::new(labels)?))
}
