//! Branching centerline growth inside a lobe mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::volume::GridDims;

pub(crate) type P3 = [f64; 3];

/// Centerline sampling step, in voxels.
pub(crate) const STEP: f64 = 0.5;

pub(crate) fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: P3, s: f64) -> P3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: P3, b: P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: P3, b: P3) -> P3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: P3) -> P3 {
    let n = dot(a, a).sqrt();
    scale(a, 1.0 / n)
}

pub(crate) fn dist2(a: P3, b: P3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    dot(d, d)
}

/// Rodrigues rotation of `v` about unit `axis`.
fn rotate(v: P3, axis: P3, angle: f64) -> P3 {
    let (s, c) = angle.sin_cos();
    let k = cross(axis, v);
    let kd = dot(axis, v) * (1.0 - c);
    [
        v[0] * c + k[0] * s + axis[0] * kd,
        v[1] * c + k[1] * s + axis[1] * kd,
        v[2] * c + k[2] * s + axis[2] * kd,
    ]
}

/// A unit vector orthogonal to `v`, randomized.
pub(crate) fn random_perpendicular(v: P3, rng: &mut ChaCha8Rng) -> P3 {
    loop {
        let r = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let c = cross(v, r);
        if dot(c, c) > 1e-3 {
            return normalize(c);
        }
    }
}

/// Nearest voxel of a `(z, y, x)` point, if inside the grid.
pub(crate) fn voxel_of(dims: GridDims, p: P3) -> Option<usize> {
    let r = [p[0].round(), p[1].round(), p[2].round()];
    if dims.contains(r[0] as i64, r[1] as i64, r[2] as i64) {
        Some(dims.index(r[0] as usize, r[1] as usize, r[2] as usize))
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Branch {
    pub samples: Vec<P3>,
    pub radius: f64,
}

/// Samples a straight segment from `start` along `dir`, stopping at the first
/// sample outside `inside`. Returns the samples and whether the full length fit.
pub(crate) fn trace(start: P3, dir: P3, length: f64, inside: &dyn Fn(P3) -> bool) -> (Vec<P3>, bool) {
    let n = (length / STEP).floor() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let p = add(start, scale(dir, k as f64 * STEP));
        if !inside(p) {
            return (out, false);
        }
        out.push(p);
    }
    (out, true)
}

pub(crate) struct Growth<'a> {
    pub inside: &'a dyn Fn(P3) -> bool,
    pub rng: &'a mut ChaCha8Rng,
}

impl Growth<'_> {
    /// Grows `levels` generations of binary children below a branch ending at
    /// `tip` with direction `dir`.
    pub(crate) fn children(&mut self, tip: P3, dir: P3, length: f64, radius: f64, levels: usize, out: &mut Vec<Branch>) {
        if levels == 0 {
            return;
        }
        let axis = random_perpendicular(dir, self.rng);
        let length = length * 0.65;
        let radius = (radius * 0.85).max(1.0);
        for sign in [1.0, -1.0] {
            let angle = sign * self.rng.random_range(25f64..40.0).to_radians();
            let child = normalize(rotate(dir, axis, angle));
            let (samples, complete) = trace(tip, child, length, self.inside);
            if samples.len() < 2 {
                continue;
            }
            let end = *samples.last().unwrap();
            out.push(Branch { samples, radius });
            if complete {
                self.children(end, child, length, radius, levels - 1, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rotation_preserves_length_and_angle() {
        let v = normalize([0.3, -0.2, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let axis = random_perpendicular(v, &mut rng);
        assert!(dot(axis, v).abs() < 1e-12);
        let r = rotate(v, axis, 0.5);
        assert!((dot(r, r) - 1.0).abs() < 1e-12);
        assert!((dot(r, v) - 0.5f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn trace_stops_at_mask_edge() {
        let inside = |p: P3| p[2] < 3.2;
        let (s, complete) = trace([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 10.0, &inside);
        assert!(!complete);
        assert_eq!(s.len(), 7);
        let (s, complete) = trace([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 2.0, &inside);
        assert!(complete);
        assert_eq!(s.len(), 5);
    }
}
