use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::phantom::Subject;
use crate::volume::{nearest_label, voxel_center_coord, GridDims, NormCoord};

/// Query points of one training step with nearest-voxel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBatch {
    pub coords: Vec<NormCoord>,
    pub labels: Vec<u8>,
    /// Marks points drawn from the bronchi/artery/vein foreground.
    pub bav_mask: Vec<bool>,
    /// Foreground sampling was requested but the subject has no tree voxels.
    pub fell_back_to_uniform: bool,
}

impl PointBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.bav_mask.iter().filter(|&&b| b).count()
    }
}

/// Voxel indices covered by any tree.
pub fn bav_foreground(subject: &Subject) -> Vec<usize> {
    (0..subject.dims().len())
        .filter(|&i| subject.bronchi.data()[i] != 0 || subject.artery.data()[i] != 0 || subject.vein.data()[i] != 0)
        .collect()
}

/// Number of uniformly drawn points, `ceil(gamma * n)`.
pub fn uniform_count(n: usize, gamma: f64) -> usize {
    ((gamma.clamp(0.0, 1.0) * n as f64).ceil() as usize).min(n)
}

// Keeps jittered points strictly closer to their source voxel than to any
// neighbor, so the nearest-voxel label is the source label.
const JITTER: f64 = 0.45;

fn jittered(dims: GridDims, i: usize, rng: &mut ChaCha8Rng) -> NormCoord {
    let (z, y, x) = dims.coords(i);
    let mut axis = |idx: usize, n: usize| {
        voxel_center_coord(idx, n) + rng.random_range(-JITTER..JITTER) * 2.0 / (n - 1) as f64
    };
    let px = axis(x, dims.w);
    let py = axis(y, dims.h);
    let pz = axis(z, dims.d);
    NormCoord::new(px, py, pz)
}

/// Draws `ceil(gamma n)` points uniformly over `[-1, 1]^3` first, then the
/// rest from jittered tree voxels, labeling each by its nearest segment voxel.
pub fn sample_points(subject: &Subject, n: usize, gamma: f64, foreground: &[usize], rng: &mut ChaCha8Rng) -> PointBatch {
    let dims = subject.dims();
    let mut n_uniform = uniform_count(n, gamma);
    let fell_back = n_uniform < n && foreground.is_empty();
    if fell_back {
        log::warn!("subject without tree voxels; sampling all {n} points uniformly");
        n_uniform = n;
    }
    let mut coords = Vec::with_capacity(n);
    let mut bav_mask = Vec::with_capacity(n);
    for _ in 0..n_uniform {
        coords.push(NormCoord::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ));
        bav_mask.push(false);
    }
    for _ in n_uniform..n {
        let i = foreground[rng.random_range(0..foreground.len())];
        coords.push(jittered(dims, i, rng));
        bav_mask.push(true);
    }
    let labels = coords.iter().map(|&p| nearest_label(&subject.segments, p)).collect();
    PointBatch {
        coords,
        labels,
        bav_mask,
        fell_back_to_uniform: fell_back,
    }
}
