use serde::{Deserialize, Serialize};

use super::{GridDims, LabelVolume, VoxelSet};

/// Voxel adjacency used for grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge and corner neighbors.
    #[default]
    TwentySix,
}

impl Connectivity {
    /// Neighbor offsets `(dz, dy, dx)` that precede a voxel in scan order.
    fn backward_offsets(self) -> Vec<(i64, i64, i64)> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let taxicab = dz.abs() + dy.abs() + dx.abs();
                    if taxicab == 0 || (self == Connectivity::Six && taxicab != 1) {
                        continue;
                    }
                    if (dz, dy, dx) < (0, 0, 0) {
                        out.push((dz, dy, dx));
                    }
                }
            }
        }
        out
    }
}

pub(crate) const FACE_OFFSETS: [(i64, i64, i64); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let grand = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = grand;
            a = grand;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // keep the smaller root so roots are the earliest member
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Splits `mask` into maximal connected groups, ordered by their smallest
/// `(z, y, x)` member.
pub fn connected_components(mask: &VoxelSet, connectivity: Connectivity) -> Vec<VoxelSet> {
    let dims = mask.dims();
    if mask.is_empty() {
        return Vec::new();
    }
    let mut slot = vec![u32::MAX; dims.len()];
    for (k, &i) in mask.indices().iter().enumerate() {
        slot[i] = k as u32;
    }
    let offsets = connectivity.backward_offsets();
    let mut sets = DisjointSet::new(mask.len());
    for (k, &i) in mask.indices().iter().enumerate() {
        let (z, y, x) = dims.coords(i);
        for &(dz, dy, dx) in &offsets {
            let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
            if !dims.contains(nz, ny, nx) {
                continue;
            }
            let j = slot[dims.index(nz as usize, ny as usize, nx as usize)];
            if j != u32::MAX {
                sets.union(k as u32, j);
            }
        }
    }
    // Roots are each group's first member, so first-seen order is min-member order.
    let mut group_of_root = vec![u32::MAX; mask.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (k, &i) in mask.indices().iter().enumerate() {
        let r = sets.find(k as u32) as usize;
        if group_of_root[r] == u32::MAX {
            group_of_root[r] = groups.len() as u32;
            groups.push(Vec::new());
        }
        groups[group_of_root[r] as usize].push(i);
    }
    groups
        .into_iter()
        .map(|g| VoxelSet::from_sorted_unchecked(dims, g))
        .collect()
}

/// Voxels of class `cls` with at least one face neighbor of another class or
/// outside the grid.
pub fn surface_voxels(labels: &LabelVolume, cls: u8) -> VoxelSet {
    let dims = labels.dims();
    let data = labels.data();
    let mut out = Vec::new();
    for (i, &v) in data.iter().enumerate() {
        if v == cls && is_boundary(dims, data, i, cls) {
            out.push(i);
        }
    }
    VoxelSet::from_sorted_unchecked(dims, out)
}

#[inline]
fn is_boundary(dims: GridDims, data: &[u8], i: usize, cls: u8) -> bool {
    let (z, y, x) = dims.coords(i);
    FACE_OFFSETS.iter().any(|&(dz, dy, dx)| {
        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
        !dims.contains(nz, ny, nx) || data[dims.index(nz as usize, ny as usize, nx as usize)] != cls
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(dims: GridDims, coords: &[(usize, usize, usize)]) -> VoxelSet {
        VoxelSet::from_coords(dims, coords).unwrap()
    }

    /// Exhaustive pairwise union-find, independent of the scan-order pass.
    fn brute_components(mask: &VoxelSet, conn: Connectivity) -> Vec<Vec<usize>> {
        let members: Vec<(usize, (usize, usize, usize))> = mask
            .indices()
            .iter()
            .map(|&i| (i, mask.dims().coords(i)))
            .collect();
        let n = members.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(p: &mut [usize], mut a: usize) -> usize {
            while p[a] != a {
                a = p[a];
            }
            a
        }
        for a in 0..n {
            for b in a + 1..n {
                let (za, ya, xa) = members[a].1;
                let (zb, yb, xb) = members[b].1;
                let d = [
                    (za as i64 - zb as i64).abs(),
                    (ya as i64 - yb as i64).abs(),
                    (xa as i64 - xb as i64).abs(),
                ];
                let adjacent = match conn {
                    Connectivity::Six => d.iter().sum::<i64>() == 1,
                    Connectivity::TwentySix => d.iter().all(|&v| v <= 1),
                };
                if adjacent {
                    let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for k in 0..n {
            let r = root(&mut parent, k);
            groups.entry(r).or_default().push(members[k].0);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }

    #[test]
    fn face_and_corner_adjacency() {
        let dims = GridDims::cube(4).unwrap();
        let face = set(dims, &[(1, 1, 1), (2, 1, 1)]);
        assert_eq!(connected_components(&face, Connectivity::Six).len(), 1);
        let corner = set(dims, &[(1, 1, 1), (2, 2, 2)]);
        assert_eq!(connected_components(&corner, Connectivity::Six).len(), 2);
        assert_eq!(connected_components(&corner, Connectivity::TwentySix).len(), 1);
    }

    #[test]
    fn random_masks_match_pairwise_union_find() {
        let dims = GridDims::cube(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let density = 0.1 + 0.05 * trial as f64;
            let idx: Vec<usize> = (0..dims.len()).filter(|_| rng.random_bool(density)).collect();
            let mask = VoxelSet::from_indices(dims, idx);
            for conn in [Connectivity::Six, Connectivity::TwentySix] {
                let fast: Vec<Vec<usize>> = connected_components(&mask, conn)
                    .into_iter()
                    .map(|g| g.indices().to_vec())
                    .collect();
                assert_eq!(fast, brute_components(&mask, conn));
            }
        }
    }

    #[test]
    fn solid_block_surface() {
        let dims = GridDims::cube(7).unwrap();
        let mut vol = LabelVolume::zeros(dims, 3);
        for z in 2..5 {
            for y in 2..5 {
                for x in 2..5 {
                    vol.set(z, y, x, 2);
                }
            }
        }
        let s = surface_voxels(&vol, 2);
        assert_eq!(s.len(), 26);
        assert!(!s.contains_index(dims.index(3, 3, 3)));
    }

    #[test]
    fn isolated_and_empty_surfaces() {
        let dims = GridDims::cube(5).unwrap();
        let mut vol = LabelVolume::zeros(dims, 3);
        vol.set(2, 2, 2, 1);
        assert_eq!(surface_voxels(&vol, 1).indices(), &[dims.index(2, 2, 2)]);
        assert!(surface_voxels(&vol, 2).is_empty());
    }

    #[test]
    fn grid_border_counts_as_surface() {
        let dims = GridDims::cube(3).unwrap();
        let vol = LabelVolume::new(dims, 2, vec![1; 27]).unwrap();
        assert_eq!(surface_voxels(&vol, 1).len(), 26);
    }

    proptest! {
        #[test]
        fn components_partition_the_mask(seed in 0u64..1000, density in 0.05f64..0.6) {
            let dims = GridDims::new(5, 6, 7).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx: Vec<usize> = (0..dims.len()).filter(|_| rng.random_bool(density)).collect();
            let mask = VoxelSet::from_indices(dims, idx.clone());
            let groups = connected_components(&mask, Connectivity::TwentySix);
            let mut all: Vec<usize> = groups.iter().flat_map(|g| g.indices().to_vec()).collect();
            all.sort_unstable();
            prop_assert_eq!(&all, mask.indices());
            // enumeration order of the input does not matter
            let mut shuffled = idx;
            shuffled.reverse();
            let again = connected_components(&VoxelSet::from_indices(dims, shuffled), Connectivity::TwentySix);
            prop_assert_eq!(groups, again);
        }

        #[test]
        fn surface_is_subset_and_minimal(seed in 0u64..1000) {
            let dims = GridDims::cube(6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..dims.len()).map(|_| rng.random_range(0..3u8)).collect();
            let vol = LabelVolume::new(dims, 3, data).unwrap();
            let surf = surface_voxels(&vol, 1);
            for &i in surf.indices() {
                prop_assert_eq!(vol.data()[i], 1);
            }
            // every surface voxel has a witness neighbor; interior voxels have none
            for i in 0..dims.len() {
                if vol.data()[i] == 1 {
                    prop_assert_eq!(surf.contains_index(i), is_boundary(dims, vol.data(), i, 1));
                }
            }
        }
    }
}
