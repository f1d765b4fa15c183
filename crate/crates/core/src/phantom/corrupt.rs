use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Subject;
use crate::volume::{LabelVolume, FACE_OFFSETS};

const CORRUPT_STREAM: u64 = 0xc0ff_ee00_0000_0001;

/// Boundary voxels of `tree`: labeled voxels with an unlabeled face neighbor
/// (erosion candidates) and unlabeled voxels with a labeled face neighbor
/// (dilation candidates, paired with the lowest neighboring class).
pub(crate) fn boundary_candidates(tree: &LabelVolume) -> Vec<(usize, u8)> {
    let dims = tree.dims();
    let data = tree.data();
    let mut out = Vec::new();
    for i in 0..dims.len() {
        let (z, y, x) = dims.coords(i);
        let mut touching = 0u8;
        let mut lowest = u8::MAX;
        for &(dz, dy, dx) in &FACE_OFFSETS {
            let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
            if !dims.contains(nz, ny, nx) {
                continue;
            }
            let v = data[dims.index(nz as usize, ny as usize, nx as usize)];
            if (v == 0) != (data[i] == 0) {
                touching += 1;
                if v != 0 {
                    lowest = lowest.min(v);
                }
            }
        }
        if touching > 0 {
            out.push((i, if data[i] == 0 { lowest } else { 0 }));
        }
    }
    out
}

fn corrupt_tree(tree: &LabelVolume, rate: f64, rng: &mut ChaCha8Rng) -> LabelVolume {
    let mut out = tree.clone();
    for (i, replacement) in boundary_candidates(tree) {
        if rng.random_bool(rate) {
            out.set_index(i, replacement);
        }
    }
    // never erase a class completely
    for cls in 1..tree.num_classes() {
        if out.count(cls) == 0 {
            for &i in tree.voxels_of(cls).indices() {
                out.set_index(i, cls);
            }
        }
    }
    out
}

/// Randomly erodes and dilates tree boundaries, imitating predicted tree
/// shapes. Deterministic per subject seed; `flip_rate` is clamped to `[0, 0.5)`.
pub fn corrupt_shapes(subject: &Subject, flip_rate: f64) -> Subject {
    let rate = if flip_rate.is_finite() { flip_rate.clamp(0.0, 0.499) } else { 0.0 };
    if rate == 0.0 {
        return subject.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subject.spec.seed ^ CORRUPT_STREAM);
    let bronchi = corrupt_tree(&subject.bronchi, rate, &mut rng);
    let artery = corrupt_tree(&subject.artery, rate, &mut rng);
    let vein = corrupt_tree(&subject.vein, rate, &mut rng);
    let mut isv = subject.intersegmental_vein.clone();
    for i in 0..isv.dims().len() {
        if vein.data()[i] == 0 {
            isv.set_index(i, 0);
        }
    }
    Subject {
        bronchi,
        artery,
        vein,
        intersegmental_vein: isv,
        ..subject.clone()
    }
}
