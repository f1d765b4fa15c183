//! Procedural lung-like subjects: lobes, segments, bronchial/arterial/venous
//! trees and a matching CT-like image.
//!
//! Segments are a nearest-centerline partition of each lobe, and every tree
//! voxel is clipped to the segment of its own class, so ground-truth trees
//! never intrude into foreign segments.

mod bundle;
mod corrupt;
mod split;
mod tree;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{GridDims, LabelVolume, ScalarVolume};
use crate::{Error, Result};

pub use bundle::{generate_dataset, list_subjects, load_subject, save_subject, subject_id, BundleMeta};
pub use corrupt::corrupt_shapes;
pub use split::{split_dataset, DatasetSplit, MIN_SPLIT_IDS};

use tree::{add, dist2, normalize, random_perpendicular, scale, trace, voxel_of, Branch, Growth, P3};

/// Upper bound on segment classes (the adult lung has 18 segments).
pub const MAX_SEGMENT_CLASSES: usize = 18;

/// Smallest supported grid edge.
pub const MIN_EDGE: usize = 16;

/// Angular jitter of segmental branches, as a fraction of their fan sector.
const SEGMENT_JITTER: f64 = 0.35;

pub const TISSUE_OUTSIDE: f32 = 0.2;
pub const TISSUE_PARENCHYMA: f32 = -0.6;
pub const TISSUE_FISSURE: f32 = -0.45;
pub const TISSUE_AIRWAY: f32 = -1.0;
pub const TISSUE_VESSEL: f32 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `[d, h, w]`.
    pub dims: [usize; 3],
    pub num_lobes: usize,
    pub segments_per_lobe: usize,
    /// Generations per segmental subtree, counting the segmental branch.
    pub tree_depth: usize,
    /// Segmental branch radius in voxels.
    pub branch_radius: f64,
    pub noise_std: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [48; 3],
            num_lobes: 2,
            segments_per_lobe: 2,
            tree_depth: 3,
            branch_radius: 1.2,
            noise_std: 0.05,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Segment classes `K`, excluding background.
    pub fn num_segments(&self) -> usize {
        self.num_lobes * self.segments_per_lobe
    }

    /// `K + 1`.
    pub fn num_classes(&self) -> u8 {
        (self.num_segments() + 1) as u8
    }

    pub fn grid(&self) -> Result<GridDims> {
        GridDims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn validate(&self) -> Result<GridDims> {
        let dims = self.grid()?;
        let bad = |m: String| Err(Error::InvalidValue(m));
        if self.num_lobes == 0 || self.segments_per_lobe == 0 {
            return bad("num_lobes and segments_per_lobe must be >= 1".into());
        }
        if self.num_segments() > MAX_SEGMENT_CLASSES {
            return bad(format!(
                "{} segment classes exceed the maximum of {MAX_SEGMENT_CLASSES}",
                self.num_segments()
            ));
        }
        if self.tree_depth < 2 {
            return bad(format!("tree_depth must be >= 2, got {}", self.tree_depth));
        }
        if !(self.branch_radius >= 1.0 && self.branch_radius.is_finite()) {
            return bad(format!("branch_radius must be >= 1 voxel, got {}", self.branch_radius));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.dims.iter().any(|&n| n < MIN_EDGE) {
            return Err(Error::Infeasible(format!(
                "dims {:?} below the minimum edge of {MIN_EDGE}",
                self.dims
            )));
        }
        if self.dims[0] / self.num_lobes < 8 {
            return Err(Error::Infeasible(format!(
                "{} lobes do not fit along z = {}",
                self.num_lobes, self.dims[0]
            )));
        }
        Ok(dims)
    }

    /// Names indexed by class id: `background`, then `L{lobe}S{segment}`.
    pub fn class_names(&self) -> Vec<String> {
        let mut out = vec!["background".to_string()];
        for l in 0..self.num_lobes {
            for s in 0..self.segments_per_lobe {
                out.push(format!("L{}S{}", l + 1, s + 1));
            }
        }
        out
    }
}

/// One labeled subject. Tree volumes carry the segment class of each voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub spec: PhantomSpec,
    pub image: ScalarVolume,
    pub lobes: LabelVolume,
    pub segments: LabelVolume,
    pub bronchi: LabelVolume,
    pub artery: LabelVolume,
    pub vein: LabelVolume,
    /// Binary.
    pub intersegmental_vein: LabelVolume,
}

impl Subject {
    pub fn dims(&self) -> GridDims {
        self.segments.dims()
    }

    pub fn num_classes(&self) -> u8 {
        self.segments.num_classes()
    }
}

struct Ellipsoid {
    center: P3,
    radii: P3,
}

impl Ellipsoid {
    fn contains(&self, p: P3) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Plane `z = z0 + ty (y - cy) + tx (x - cx)` between consecutive lobes.
struct Fissure {
    z0: f64,
    ty: f64,
    tx: f64,
    cy: f64,
    cx: f64,
}

impl Fissure {
    fn below(&self, p: P3) -> bool {
        p[0] < self.z0 + self.ty * (p[1] - self.cy) + self.tx * (p[2] - self.cx)
    }
}

fn lobe_volume(dims: GridDims, spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> (LabelVolume, Vec<Ellipsoid>) {
    let l = spec.num_lobes;
    let fd = |n: usize| (n - 1) as f64;
    let margin = 2.0;
    let span = fd(dims.d) - 2.0 * margin;
    let (cy, cx) = (fd(dims.h) / 2.0, fd(dims.w) / 2.0);
    let mut ellipsoids = Vec::with_capacity(l);
    for k in 0..l {
        let cz = margin + (k as f64 + 0.5) * span / l as f64 + rng.random_range(-0.5..0.5);
        let rz = (span / (2.0 * l as f64) * rng.random_range(1.15..1.3))
            .min(cz - 1.0)
            .min(fd(dims.d) - 1.0 - cz);
        let ey = cy + rng.random_range(-1.5..1.5);
        let ex = cx + rng.random_range(-1.5..1.5);
        let ry = (fd(dims.h) / 2.0 - margin) * rng.random_range(0.8..0.95);
        let rx = (fd(dims.w) / 2.0 - margin) * rng.random_range(0.75..0.95);
        ellipsoids.push(Ellipsoid {
            center: [cz, ey, ex],
            radii: [rz, ry, rx],
        });
    }
    let fissures: Vec<Fissure> = (0..l.saturating_sub(1))
        .map(|k| Fissure {
            z0: (ellipsoids[k].center[0] + ellipsoids[k + 1].center[0]) / 2.0 + rng.random_range(-1.0..1.0),
            ty: rng.random_range(-0.3..0.3),
            tx: rng.random_range(-0.2..0.2),
            cy,
            cx,
        })
        .collect();
    let mut lobes = LabelVolume::zeros(dims, (l + 1) as u8);
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let p = [z as f64, y as f64, x as f64];
                if ellipsoids.iter().any(|e| e.contains(p)) {
                    let above = fissures.iter().filter(|f| !f.below(p)).count();
                    lobes.set(z, y, x, (above + 1) as u8);
                }
            }
        }
    }
    (lobes, ellipsoids)
}

fn centroid(dims: GridDims, labels: &LabelVolume, cls: u8) -> Option<P3> {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (i, &v) in labels.data().iter().enumerate() {
        if v == cls {
            let (z, y, x) = dims.coords(i);
            acc = add(acc, [z as f64, y as f64, x as f64]);
            n += 1;
        }
    }
    (n > 0).then(|| scale(acc, 1.0 / n as f64))
}

/// Distance from `p` along `dir` until the mask is left.
fn exit_distance(p: P3, dir: P3, inside: &dyn Fn(P3) -> bool) -> f64 {
    let mut t = 0.0;
    while inside(add(p, scale(dir, t + tree::STEP))) {
        t += tree::STEP;
    }
    t
}

/// Segmental subtrees of one lobe, one entry per segment.
fn grow_lobe(
    dims: GridDims,
    lobes: &LabelVolume,
    lobe: u8,
    ellipsoid: &Ellipsoid,
    spec: &PhantomSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Branch>>> {
    let inside = |p: P3| voxel_of(dims, p).is_some_and(|i| lobes.data()[i] == lobe);
    let c = centroid(dims, lobes, lobe)
        .ok_or_else(|| Error::Infeasible(format!("lobe {lobe} is empty")))?;
    // hilum on the medial (-x) side
    let mut hilum = [
        c[0] + rng.random_range(-1.0..1.0),
        c[1] + rng.random_range(-1.0..1.0),
        c[2] - 0.45 * ellipsoid.radii[2],
    ];
    while !inside(hilum) {
        hilum[2] += tree::STEP;
        if hilum[2] > c[2] + ellipsoid.radii[2] {
            return Err(Error::Infeasible(format!("no hilum position inside lobe {lobe}")));
        }
    }
    let s_count = spec.segments_per_lobe;
    // jitter stays below half a fan so sibling directions keep their order
    let mut subtrees = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let fan = std::f64::consts::PI / s_count as f64;
        let phi = -std::f64::consts::FRAC_PI_2 + fan * (s as f64 + 0.5) + rng.random_range(-SEGMENT_JITTER..SEGMENT_JITTER) * fan;
        let dir = normalize([rng.random_range(-0.3..0.3), 1.1 * phi.sin(), phi.cos()]);
        let reach = exit_distance(hilum, dir, &inside);
        let length = reach * rng.random_range(0.45..0.55);
        let (samples, complete) = trace(hilum, dir, length, &inside);
        if samples.len() < 2 {
            return Err(Error::Infeasible(format!(
                "segmental branch {} of lobe {lobe} does not fit inside the lobe",
                s + 1
            )));
        }
        let end = *samples.last().unwrap();
        let mut branches = vec![Branch {
            samples,
            radius: spec.branch_radius,
        }];
        if complete {
            let mut g = Growth { inside: &inside, rng: &mut *rng };
            g.children(end, dir, length, spec.branch_radius, spec.tree_depth - 1, &mut branches);
        }
        subtrees.push(branches);
    }
    Ok(subtrees)
}

/// Nearest-centerline partition of each lobe into segment classes; ties go to
/// the lower class.
fn partition(dims: GridDims, lobes: &LabelVolume, trees: &[Vec<Vec<Branch>>], spec: &PhantomSpec) -> LabelVolume {
    let mut segments = LabelVolume::zeros(dims, spec.num_classes());
    let samples: Vec<Vec<(P3, u8)>> = trees
        .iter()
        .enumerate()
        .map(|(l, subtrees)| {
            subtrees
                .iter()
                .enumerate()
                .flat_map(|(s, branches)| {
                    let cls = (l * spec.segments_per_lobe + s + 1) as u8;
                    branches.iter().flat_map(move |b| b.samples.iter().map(move |&p| (p, cls)))
                })
                .collect()
        })
        .collect();
    for i in 0..dims.len() {
        let lobe = lobes.data()[i];
        if lobe == 0 {
            continue;
        }
        let (z, y, x) = dims.coords(i);
        let p = [z as f64, y as f64, x as f64];
        let mut best = (f64::INFINITY, 0u8);
        for &(q, cls) in &samples[lobe as usize - 1] {
            let d = dist2(p, q);
            if d < best.0 || (d == best.0 && cls < best.1) {
                best = (d, cls);
            }
        }
        segments.set_index(i, best.1);
    }
    segments
}

/// Marks voxels within `radius` of each sample with `cls`, only where the
/// segment volume agrees.
fn paint_tube(target: &mut LabelVolume, segments: &LabelVolume, samples: &[P3], radius: f64, cls: u8) {
    let dims = target.dims();
    let r = radius.ceil() as i64;
    let r2 = radius * radius;
    for &p in samples {
        let c = [p[0].round() as i64, p[1].round() as i64, p[2].round() as i64];
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (z, y, x) = (c[0] + dz, c[1] + dy, c[2] + dx);
                    if !dims.contains(z, y, x) {
                        continue;
                    }
                    if dist2(p, [z as f64, y as f64, x as f64]) > r2 {
                        continue;
                    }
                    let i = dims.index(z as usize, y as usize, x as usize);
                    if segments.data()[i] == cls {
                        target.set_index(i, cls);
                    }
                }
            }
        }
    }
}

fn face_neighbors(dims: GridDims, i: usize) -> impl Iterator<Item = usize> {
    let (z, y, x) = dims.coords(i);
    crate::volume::FACE_OFFSETS.iter().filter_map(move |&(dz, dy, dx)| {
        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
        dims.contains(nz, ny, nx)
            .then(|| dims.index(nz as usize, ny as usize, nx as usize))
    })
}

/// Voxels on a boundary between two different nonzero segments.
fn ridge_voxels(segments: &LabelVolume) -> Vec<bool> {
    let dims = segments.dims();
    let data = segments.data();
    (0..dims.len())
        .map(|i| {
            data[i] != 0 && face_neighbors(dims, i).any(|j| data[j] != 0 && data[j] != data[i])
        })
        .collect()
}

/// Random walks over ridge voxels, the phantom's intersegmental veins.
fn trace_ridges(segments: &LabelVolume, rng: &mut ChaCha8Rng, walks: usize, steps: usize) -> Vec<bool> {
    let dims = segments.dims();
    let ridge = ridge_voxels(segments);
    let candidates: Vec<usize> = (0..dims.len()).filter(|&i| ridge[i]).collect();
    let mut out = vec![false; dims.len()];
    if candidates.is_empty() {
        return out;
    }
    for _ in 0..walks {
        let mut cur = candidates[rng.random_range(0..candidates.len())];
        out[cur] = true;
        for _ in 0..steps {
            let (z, y, x) = dims.coords(cur);
            let mut next = Vec::new();
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if dims.contains(nz, ny, nx) {
                            let j = dims.index(nz as usize, ny as usize, nx as usize);
                            if ridge[j] && !out[j] {
                                next.push(j);
                            }
                        }
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            cur = next[rng.random_range(0..next.len())];
            out[cur] = true;
        }
    }
    out
}

/// Separable `[1, 2, 1] / 4` blur with edge clamping.
fn blur3(dims: GridDims, data: &mut [f32]) {
    let mut tmp = vec![0f32; data.len()];
    let strides = [dims.h * dims.w, dims.w, 1];
    let extents = [dims.d, dims.h, dims.w];
    for axis in 0..3 {
        for i in 0..data.len() {
            let (z, y, x) = dims.coords(i);
            let pos = [z, y, x][axis];
            let lo = if pos > 0 { i - strides[axis] } else { i };
            let hi = if pos + 1 < extents[axis] { i + strides[axis] } else { i };
            tmp[i] = 0.25 * data[lo] + 0.5 * data[i] + 0.25 * data[hi];
        }
        data.copy_from_slice(&tmp);
    }
}

fn render_image(subject_parts: &Parts, spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<ScalarVolume> {
    let Parts { lobes, bronchi, artery, vein, .. } = subject_parts;
    let dims = lobes.dims();
    let lobe_data = lobes.data();
    let mut data: Vec<f32> = (0..dims.len())
        .map(|i| {
            let l = lobe_data[i];
            if l == 0 {
                TISSUE_OUTSIDE
            } else if face_neighbors(dims, i).any(|j| lobe_data[j] != 0 && lobe_data[j] != l) {
                TISSUE_FISSURE
            } else {
                TISSUE_PARENCHYMA
            }
        })
        .collect();
    for i in 0..dims.len() {
        if bronchi.data()[i] != 0 {
            data[i] = TISSUE_AIRWAY;
        }
        if artery.data()[i] != 0 || vein.data()[i] != 0 {
            data[i] = TISSUE_VESSEL;
        }
    }
    blur3(dims, &mut data);
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidValue(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(rng) as f32;
        }
    }
    ScalarVolume::new(dims, data)
}

struct Parts {
    lobes: LabelVolume,
    bronchi: LabelVolume,
    artery: LabelVolume,
    vein: LabelVolume,
}

/// Generates one subject; a pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Subject> {
    let dims = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes();
    let (lobes, ellipsoids) = lobe_volume(dims, spec, &mut rng);

    let mut trees = Vec::with_capacity(spec.num_lobes);
    for (l, e) in ellipsoids.iter().enumerate() {
        trees.push(grow_lobe(dims, &lobes, (l + 1) as u8, e, spec, &mut rng)?);
    }
    let segments = partition(dims, &lobes, &trees, spec);

    let mut bronchi = LabelVolume::zeros(dims, k);
    let mut artery = LabelVolume::zeros(dims, k);
    for (l, subtrees) in trees.iter().enumerate() {
        // arteries run alongside the airways at a fixed per-lobe offset
        let offset = scale(random_perpendicular(normalize([0.0, 0.3, 1.0]), &mut rng), 1.6);
        for (s, branches) in subtrees.iter().enumerate() {
            let cls = (l * spec.segments_per_lobe + s + 1) as u8;
            for b in branches {
                paint_tube(&mut bronchi, &segments, &b.samples, b.radius, cls);
                let shifted: Vec<P3> = b.samples.iter().map(|&p| add(p, offset)).collect();
                paint_tube(&mut artery, &segments, &shifted, (b.radius * 0.9).max(1.0), cls);
            }
        }
    }

    let mut vein = LabelVolume::zeros(dims, k);
    for cls in 1..k {
        let members = segments.voxels_of(cls);
        if members.is_empty() {
            continue;
        }
        for _ in 0..2 {
            let start = members.indices()[rng.random_range(0..members.len())];
            let (z, y, x) = dims.coords(start);
            let dir = normalize([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            let inside = |p: P3| voxel_of(dims, p).is_some_and(|i| segments.data()[i] == cls);
            let (samples, _) = trace([z as f64, y as f64, x as f64], dir, 4.0, &inside);
            paint_tube(&mut vein, &segments, &samples, 1.0, cls);
        }
    }
    let ridges = trace_ridges(&segments, &mut rng, 2 * spec.num_segments(), 24);
    let mut isv = LabelVolume::zeros(dims, 2);
    for (i, &on) in ridges.iter().enumerate() {
        if on {
            isv.set_index(i, 1);
            vein.set_index(i, segments.data()[i]);
        }
    }

    let parts = Parts { lobes, bronchi, artery, vein };
    let image = render_image(&parts, spec, &mut rng)?;
    let Parts { lobes, bronchi, artery, vein } = parts;
    Ok(Subject {
        spec: spec.clone(),
        image,
        lobes,
        segments,
        bronchi,
        artery,
        vein,
        intersegmental_vein: isv,
    })
}

#[cfg(test)]
mod tests;
