use super::GridDims;

/// Exact squared Euclidean distance (voxel units) from every voxel center to
/// the nearest `true` voxel of `features`. Voxels are `f64::INFINITY` when
/// there are no features.
///
/// Separable lower-envelope-of-parabolas transform, one axis at a time.
pub fn squared_distance_transform(dims: GridDims, features: &[bool]) -> Vec<f64> {
    assert_eq!(features.len(), dims.len());
    let mut dist: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = dims.d.max(dims.h).max(dims.w);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut scratch = Envelope::new(longest);

    // x axis
    for z in 0..dims.d {
        for y in 0..dims.h {
            let base = dims.index(z, y, 0);
            line[..dims.w].copy_from_slice(&dist[base..base + dims.w]);
            scratch.transform(&line[..dims.w], &mut out[..dims.w]);
            dist[base..base + dims.w].copy_from_slice(&out[..dims.w]);
        }
    }
    // y axis
    for z in 0..dims.d {
        for x in 0..dims.w {
            for y in 0..dims.h {
                line[y] = dist[dims.index(z, y, x)];
            }
            scratch.transform(&line[..dims.h], &mut out[..dims.h]);
            for y in 0..dims.h {
                dist[dims.index(z, y, x)] = out[y];
            }
        }
    }
    // z axis
    for y in 0..dims.h {
        for x in 0..dims.w {
            for z in 0..dims.d {
                line[z] = dist[dims.index(z, y, x)];
            }
            scratch.transform(&line[..dims.d], &mut out[..dims.d]);
            for z in 0..dims.d {
                dist[dims.index(z, y, x)] = out[z];
            }
        }
    }
    dist
}

struct Envelope {
    vertex: Vec<usize>,
    boundary: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self {
            vertex: vec![0; n],
            boundary: vec![0.0; n + 1],
        }
    }

    /// 1-D transform `out[q] = min_p (q - p)^2 + f[p]`.
    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let mut k: isize = -1;
        for q in 0..n {
            if f[q].is_infinite() {
                continue;
            }
            loop {
                if k < 0 {
                    k = 0;
                    self.vertex[0] = q;
                    self.boundary[0] = f64::NEG_INFINITY;
                    self.boundary[1] = f64::INFINITY;
                    break;
                }
                let p = self.vertex[k as usize];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= self.boundary[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.vertex[k as usize] = q;
                self.boundary[k as usize] = s;
                self.boundary[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            out.iter_mut().for_each(|v| *v = f64::INFINITY);
            return;
        }
        let mut j = 0usize;
        for (q, slot) in out.iter_mut().enumerate() {
            while self.boundary[j + 1] < q as f64 {
                j += 1;
            }
            let p = self.vertex[j];
            let dq = q as f64 - p as f64;
            *slot = dq * dq + f[p];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let dims = GridDims::new(6, 7, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for density in [0.0, 0.01, 0.05, 0.3] {
            let feat: Vec<bool> = (0..dims.len()).map(|_| rng.random_bool(density)).collect();
            let fast = squared_distance_transform(dims, &feat);
            for i in 0..dims.len() {
                let (z, y, x) = dims.coords(i);
                let mut best = f64::INFINITY;
                for j in 0..dims.len() {
                    if feat[j] {
                        let (a, b, c) = dims.coords(j);
                        let d = (z as f64 - a as f64).powi(2)
                            + (y as f64 - b as f64).powi(2)
                            + (x as f64 - c as f64).powi(2);
                        best = best.min(d);
                    }
                }
                assert_eq!(fast[i], best);
            }
        }
    }
}
