//! 3D connected-component labelling of binary volumes.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    /// All neighbour offsets `(dz, dy, dx)`.
    pub fn offsets(self) -> Vec<(isize, isize, isize)> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push((dz, dy, dx));
                    }
                }
            }
        }
        out
    }

    /// Offsets pointing to voxels that come earlier in raster order.
    fn backward_offsets(self) -> Vec<(isize, isize, isize)> {
        self.offsets().into_iter().filter(|&o| o < (0, 0, 0)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub id: u32,
    pub volume: usize,
    pub z_min: usize,
    pub z_max: usize,
    /// Number of depth slices the component touches.
    pub occupied_slices: usize,
    /// `volume / occupied_slices`.
    pub mean_area: f64,
}

impl ComponentStats {
    /// Depth extent `z_max - z_min + 1`.
    pub fn span(&self) -> usize {
        self.z_max - self.z_min + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentLabeling {
    /// 0 for background, otherwise `1..=count` in raster order of first
    /// appearance.
    pub labels: Array3<u32>,
    pub stats: Vec<ComponentStats>,
}

impl ComponentLabeling {
    pub fn count(&self) -> usize {
        self.stats.len()
    }

    /// Binary mask of one component.
    pub fn mask(&self, id: u32) -> Array3<bool> {
        self.labels.mapv(|l| l == id)
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

pub fn connected_components(mask: &Array3<bool>, connectivity: Connectivity) -> ComponentLabeling {
    let (d, h, w) = mask.dim();
    let offsets = connectivity.backward_offsets();
    let mut provisional = Array3::<u32>::zeros((d, h, w));
    // index 0 is unused so provisional labels can start at 1
    let mut parent: Vec<u32> = vec![0];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[(z, y, x)] {
                    continue;
                }
                let mut label = 0u32;
                for &(dz, dy, dx) in &offsets {
                    let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if nz < 0 || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let n = provisional[(nz as usize, ny as usize, nx as usize)];
                    if n == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = find(&mut parent, n);
                    } else {
                        let (a, b) = (find(&mut parent, label), find(&mut parent, n));
                        if a != b {
                            let (lo, hi) = (a.min(b), a.max(b));
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[(z, y, x)] = label;
            }
        }
    }

    let mut dense = vec![0u32; parent.len()];
    let mut stats: Vec<ComponentStats> = Vec::new();
    let mut last_slice: Vec<usize> = Vec::new();
    let mut labels = Array3::<u32>::zeros((d, h, w));
    for ((z, y, x), &p) in provisional.indexed_iter() {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if dense[root] == 0 {
            stats.push(ComponentStats {
                id: stats.len() as u32 + 1,
                volume: 0,
                z_min: z,
                z_max: z,
                occupied_slices: 0,
                mean_area: 0.0,
            });
            last_slice.push(usize::MAX);
            dense[root] = stats.len() as u32;
        }
        let id = dense[root];
        let s = &mut stats[id as usize - 1];
        s.volume += 1;
        s.z_max = s.z_max.max(z);
        if last_slice[id as usize - 1] != z {
            last_slice[id as usize - 1] = z;
            s.occupied_slices += 1;
        }
        labels[(z, y, x)] = id;
    }
    for s in &mut stats {
        s.mean_area = s.volume as f64 / s.occupied_slices as f64;
    }
    ComponentLabeling { labels, stats }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    /// Flood fill; returns a component index per voxel (`usize::MAX` for
    /// background).
    pub(crate) fn bfs_components(mask: &Array3<bool>, connectivity: Connectivity) -> (Array3<usize>, usize) {
        let dims = mask.dim();
        let mut out = Array3::from_elem(dims, usize::MAX);
        let mut n = 0;
        for (start, &v) in mask.indexed_iter() {
            if !v || out[start] != usize::MAX {
                continue;
            }
            let mut queue = VecDeque::from([start]);
            out[start] = n;
            while let Some((z, y, x)) = queue.pop_front() {
                for (dz, dy, dx) in connectivity.offsets() {
                    let p = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if p.0 < 0 || p.1 < 0 || p.2 < 0 {
                        continue;
                    }
                    let p = (p.0 as usize, p.1 as usize, p.2 as usize);
                    if p.0 < dims.0 && p.1 < dims.1 && p.2 < dims.2 && mask[p] && out[p] == usize::MAX {
                        out[p] = n;
                        queue.push_back(p);
                    }
                }
            }
            n += 1;
        }
        (out, n)
    }

    fn same_partition(labels: &Array3<u32>, oracle: &Array3<usize>) -> bool {
        let mut map = std::collections::HashMap::new();
        let mut back = std::collections::HashMap::new();
        labels.iter().zip(oracle).all(|(&l, &o)| {
            if l == 0 || o == usize::MAX {
                return l == 0 && o == usize::MAX;
            }
            *map.entry(l).or_insert(o) == o && *back.entry(o).or_insert(l) == l
        })
    }

    #[test]
    fn two_isolated_voxels() {
        let mut m = Array3::from_elem((3, 3, 3), false);
        m[(0, 0, 0)] = true;
        m[(2, 2, 2)] = true;
        let c = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(c.count(), 2);
        assert!(c.stats.iter().all(|s| s.volume == 1));
    }

    #[test]
    fn diagonal_neighbours_depend_on_connectivity() {
        let mut m = Array3::from_elem((2, 2, 2), false);
        m[(0, 0, 0)] = true;
        m[(1, 1, 1)] = true;
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).count(), 2);
    }

    #[test]
    fn full_cube_and_stats() {
        let m = Array3::from_elem((4, 5, 6), true);
        let c = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(c.count(), 1);
        let s = &c.stats[0];
        assert_eq!((s.volume, s.span(), s.occupied_slices, s.mean_area), (120, 4, 4, 30.0));
    }

    #[test]
    fn ids_are_dense_in_raster_order() {
        let mut m = Array3::from_elem((1, 1, 7), false);
        for x in [1, 3, 5] {
            m[(0, 0, x)] = true;
        }
        let c = connected_components(&m, Connectivity::Six);
        assert_eq!(c.labels.iter().copied().collect::<Vec<_>>(), [0, 1, 0, 2, 0, 3, 0]);
    }

    #[test]
    fn u_shape_merges_late() {
        // two prongs joined only at the bottom row
        let mut m = Array3::from_elem((1, 3, 3), false);
        for y in 0..3 {
            m[(0, y, 0)] = true;
            m[(0, y, 2)] = true;
        }
        m[(0, 2, 1)] = true;
        let c = connected_components(&m, Connectivity::Six);
        assert_eq!(c.count(), 1);
        assert_eq!(c.stats[0].volume, 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn agrees_with_flood_fill(bits in proptest::collection::vec(any::<bool>(), 512), six in any::<bool>()) {
            let m = Array3::from_shape_vec((8, 8, 8), bits).unwrap();
            let conn = if six { Connectivity::Six } else { Connectivity::TwentySix };
            let c = connected_components(&m, conn);
            let (oracle, n) = bfs_components(&m, conn);
            prop_assert_eq!(c.count(), n);
            prop_assert!(same_partition(&c.labels, &oracle));
            let total: usize = c.stats.iter().map(|s| s.volume).sum();
            prop_assert_eq!(total, m.iter().filter(|&&v| v).count());
        }
    }
}
