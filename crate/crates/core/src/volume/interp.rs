use super::{clamp_unit, ChannelGrid, GridDims, LabelVolume, NormCoord};

/// Continuous indices closer than this to an integer snap onto the node, so
/// that voxel centers computed through normalized coordinates stay exact.
const NODE_SNAP: f64 = 1e-10;

#[inline]
fn axis_to_index(p: f64, n: usize) -> f64 {
    let u = (clamp_unit(p) + 1.0) * 0.5 * (n - 1) as f64;
    let r = u.round();
    if (u - r).abs() <= NODE_SNAP {
        r
    } else {
        u
    }
}

/// Align-corners mapping of a normalized coordinate to a continuous voxel
/// coordinate, returned in `(x, y, z)` order. Each component lies in `[0, n-1]`.
pub fn norm_to_index(p: NormCoord, dims: GridDims) -> [f64; 3] {
    [
        axis_to_index(p.x, dims.w),
        axis_to_index(p.y, dims.h),
        axis_to_index(p.z, dims.d),
    ]
}

/// Normalized coordinate of voxel center `i` on an axis of `n` voxels.
#[inline]
pub fn voxel_center_coord(i: usize, n: usize) -> f64 {
    2.0 * i as f64 / (n - 1) as f64 - 1.0
}

/// Interpolation stencil along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisStencil {
    pub lo: usize,
    pub frac: f64,
    /// The raw coordinate was outside `[-1, 1]` and got clamped.
    pub clamped: bool,
}

/// Stencil for a raw (possibly out-of-range) normalized coordinate on an axis
/// of `n >= 2` voxels. The upper node is always `lo + 1`.
#[inline]
pub fn axis_stencil(p: f64, n: usize) -> AxisStencil {
    let clamped = !(-1.0..=1.0).contains(&p);
    let u = axis_to_index(p, n);
    let lo = (u.floor() as usize).min(n - 2);
    AxisStencil {
        lo,
        frac: u - lo as f64,
        clamped,
    }
}

/// Corner offsets and weights of a trilinear stencil, in a fixed order
/// (z-major, then y, then x) shared by every sampler in the crate.
#[inline]
pub(crate) fn corner_weights(dims: GridDims, st: &[AxisStencil; 3]) -> ([usize; 8], [f64; 8]) {
    let [sx, sy, sz] = st;
    let wx = [1.0 - sx.frac, sx.frac];
    let wy = [1.0 - sy.frac, sy.frac];
    let wz = [1.0 - sz.frac, sz.frac];
    let mut idx = [0usize; 8];
    let mut w = [0f64; 8];
    let mut k = 0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                idx[k] = dims.index(sz.lo + dz, sy.lo + dy, sx.lo + dx);
                w[k] = wz[dz] * wy[dy] * wx[dx];
                k += 1;
            }
        }
    }
    (idx, w)
}

/// Trilinear blend of a channel-major buffer at a precomputed stencil.
#[inline]
pub(crate) fn blend_channels(
    data: &[f64],
    channels: usize,
    dims: GridDims,
    st: &[AxisStencil; 3],
    out: &mut [f64],
) {
    let (idx, w) = corner_weights(dims, st);
    let n = dims.len();
    for (c, slot) in out.iter_mut().enumerate().take(channels) {
        let base = &data[c * n..(c + 1) * n];
        let mut acc = 0.0;
        for k in 0..8 {
            acc += w[k] * base[idx[k]];
        }
        *slot = acc;
    }
}

#[inline]
pub(crate) fn stencils(p: [f64; 3], dims: GridDims) -> [AxisStencil; 3] {
    [
        axis_stencil(p[0], dims.w),
        axis_stencil(p[1], dims.h),
        axis_stencil(p[2], dims.d),
    ]
}

/// Samples every channel of `field` at `p` with 8-corner trilinear weights.
pub fn trilinear_sample(field: &ChannelGrid, p: NormCoord) -> Vec<f64> {
    let st = stencils(p.as_array(), field.dims());
    let mut out = vec![0.0; field.channels()];
    blend_channels(field.data(), field.channels(), field.dims(), &st, &mut out);
    out
}

#[inline]
fn nearest_axis(u: f64, n: usize) -> usize {
    // round half down
    let i = (u - 0.5).ceil();
    (i.max(0.0) as usize).min(n - 1)
}

/// Class of the voxel whose center is nearest to `p`; ties go to the lower
/// index on each axis.
pub fn nearest_label(labels: &LabelVolume, p: NormCoord) -> u8 {
    let dims = labels.dims();
    let [u, v, w] = norm_to_index(p, dims);
    labels.get(
        nearest_axis(w, dims.d),
        nearest_axis(v, dims.h),
        nearest_axis(u, dims.w),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(n: usize) -> GridDims {
        GridDims::cube(n).unwrap()
    }

    #[test]
    fn corners_map_to_end_voxels() {
        let d = cube(8);
        assert_eq!(norm_to_index(NormCoord::new(-1.0, -1.0, -1.0), d), [0.0; 3]);
        assert_eq!(norm_to_index(NormCoord::new(1.0, 1.0, 1.0), d), [7.0; 3]);
        assert_eq!(norm_to_index(NormCoord::new(0.0, 0.0, 0.0), cube(5)), [2.0; 3]);
    }

    #[test]
    fn voxel_centers_map_exactly() {
        for n in [2usize, 5, 31, 32, 48, 95, 96, 128] {
            for i in 0..n {
                let p = voxel_center_coord(i, n);
                assert_eq!(axis_to_index(p, n), i as f64, "n={n} i={i}");
            }
        }
    }

    #[test]
    fn center_of_unit_cube_is_corner_mean() {
        let field = ChannelGrid::new(1, cube(2), (0..8).map(f64::from).collect()).unwrap();
        let v = trilinear_sample(&field, NormCoord::new(0.0, 0.0, 0.0));
        assert_eq!(v, vec![3.5]);
    }

    #[test]
    fn exact_at_nodes() {
        let dims = GridDims::new(3, 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * dims.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let field = ChannelGrid::new(2, dims, data).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let p = NormCoord::new(
                        voxel_center_coord(x, 5),
                        voxel_center_coord(y, 4),
                        voxel_center_coord(z, 3),
                    );
                    let v = trilinear_sample(&field, p);
                    let i = dims.index(z, y, x);
                    assert_eq!(v[0], field.channel(0)[i]);
                    assert_eq!(v[1], field.channel(1)[i]);
                }
            }
        }
    }

    #[test]
    fn reproduces_affine_fields() {
        let dims = GridDims::new(4, 6, 5).unwrap();
        let mut data = vec![0.0; dims.len()];
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data[dims.index(z, y, x)] = 2.0 * x as f64 + 3.0 * y as f64 - z as f64;
                }
            }
        }
        let field = ChannelGrid::new(1, dims, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = NormCoord::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let [u, v, w] = norm_to_index(p, dims);
            let expected = 2.0 * u + 3.0 * v - w;
            let got = trilinear_sample(&field, p)[0];
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn nearest_label_cases() {
        let dims = cube(2);
        // x = 0 -> class 1, x = 1 -> class 2
        let data: Vec<u8> = (0..8).map(|i| if i % 2 == 0 { 1 } else { 2 }).collect();
        let vol = LabelVolume::new(dims, 3, data).unwrap();
        assert_eq!(nearest_label(&vol, NormCoord::new(-1e-6, 0.3, -0.7)), 1);
        assert_eq!(nearest_label(&vol, NormCoord::new(0.0, 0.3, -0.7)), 1);
        assert_eq!(nearest_label(&vol, NormCoord::new(1e-6, 0.3, -0.7)), 2);

        let uniform = LabelVolume::new(cube(5), 4, vec![3; 125]).unwrap();
        assert_eq!(nearest_label(&uniform, NormCoord::new(0.123, -0.9, 0.4)), 3);
    }

    #[test]
    fn nearest_label_hits_voxel_centers() {
        let dims = GridDims::new(3, 4, 6).unwrap();
        let data: Vec<u8> = (0..dims.len()).map(|i| (i % 7) as u8).collect();
        let vol = LabelVolume::new(dims, 7, data).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..6 {
                    let p = NormCoord::new(
                        voxel_center_coord(x, 6),
                        voxel_center_coord(y, 4),
                        voxel_center_coord(z, 3),
                    );
                    assert_eq!(nearest_label(&vol, p), vol.get(z, y, x));
                }
            }
        }
    }

    #[test]
    fn stencil_flags_clamped_inputs() {
        let s = axis_stencil(1.5, 4);
        assert!(s.clamped);
        assert_eq!((s.lo, s.frac), (2, 1.0));
        let s = axis_stencil(-0.2, 4);
        assert!(!s.clamped);
    }
}
