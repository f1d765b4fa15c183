//! Voxel-grid containers and the geometry shared by every other module.
//!
//! All volumes are stored row-major with `z` slowest:
//! `index = ((z * h) + y) * w + x`. Continuous coordinates use the
//! align-corners convention, so `-1` and `+1` land exactly on the first and
//! last voxel centers of each axis.

mod edt;
pub(crate) mod interp;
mod resample;
pub mod svol;
mod topology;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use edt::squared_distance_transform;
pub use interp::{
    axis_stencil, nearest_label, norm_to_index, trilinear_sample, voxel_center_coord, AxisStencil,
};
pub use resample::{downsample_labels, downsample_scalar};
pub use topology::{connected_components, surface_voxels, Connectivity};
pub(crate) use topology::FACE_OFFSETS;

/// Voxel counts per axis, `d` (z) slowest, `w` (x) fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(d: usize, h: usize, w: usize) -> Result<Self> {
        if d < 2 || h < 2 || w < 2 {
            return Err(Error::InvalidDims([d, h, w]));
        }
        d.checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or(Error::InvalidDims([d, h, w]))?;
        Ok(Self { d, h, w })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    /// Inverse of [`GridDims::index`], returned as `(z, y, x)`.
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.w;
        let rest = idx / self.w;
        (rest / self.h, rest % self.h, x)
    }

    #[inline]
    pub fn contains(&self, z: i64, y: i64, x: i64) -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < self.d
            && (y as usize) < self.h
            && (x as usize) < self.w
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    /// Size along an axis in `(x, y, z)` order.
    #[inline]
    pub fn axis_len_xyz(&self, axis: usize) -> usize {
        match axis {
            0 => self.w,
            1 => self.h,
            _ => self.d,
        }
    }
}

/// Single-channel `f32` volume (CT-like image input).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    dims: GridDims,
    data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(dims: GridDims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "scalar volume data has {} values, dims {:?} need {}",
                data.len(),
                dims.as_array(),
                dims.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite voxel value at index {i}")));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: GridDims, value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Dense grid of class ids, `0` being background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: GridDims,
    num_classes: u8,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: GridDims, num_classes: u8, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "label volume data has {} values, dims {:?} need {}",
                data.len(),
                dims.as_array(),
                dims.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidValue("num_classes must be at least 1".into()));
        }
        if let Some(&bad) = data.iter().find(|&&v| v >= num_classes) {
            return Err(Error::InvalidValue(format!(
                "class id {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            dims,
            num_classes,
            data,
        })
    }

    pub fn zeros(dims: GridDims, num_classes: u8) -> Self {
        Self {
            dims,
            num_classes: num_classes.max(1),
            data: vec![0; dims.len()],
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Panics if `class >= num_classes`.
    pub fn set(&mut self, z: usize, y: usize, x: usize, class: u8) {
        assert!(class < self.num_classes, "class {class} out of range");
        let i = self.dims.index(z, y, x);
        self.data[i] = class;
    }

    /// Panics if `class >= num_classes`.
    pub fn set_index(&mut self, idx: usize, class: u8) {
        assert!(class < self.num_classes, "class {class} out of range");
        self.data[idx] = class;
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// All voxels carrying `class`.
    pub fn voxels_of(&self, class: u8) -> VoxelSet {
        VoxelSet::from_sorted_unchecked(
            self.dims,
            self.data
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == class)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    /// All nonzero voxels.
    pub fn foreground(&self) -> VoxelSet {
        VoxelSet::from_sorted_unchecked(
            self.dims,
            self.data
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }
}

/// Normalized continuous coordinate in `[-1, 1]^3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormCoord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl NormCoord {
    /// Components are clamped to `[-1, 1]`; NaN maps to 0.
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x: clamp_unit(x),
            y: clamp_unit(y),
            z: clamp_unit(z),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-1.0, 1.0)
    }
}

/// Set of voxels of one grid, stored as sorted linear indices.
///
/// Since `z` is the slowest axis, ascending linear index is ascending
/// `(z, y, x)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelSet {
    dims: GridDims,
    indices: Vec<usize>,
}

impl VoxelSet {
    pub fn empty(dims: GridDims) -> Self {
        Self {
            dims,
            indices: Vec::new(),
        }
    }

    /// Builds a set from `(x, y, z)` coordinates; duplicates collapse.
    pub fn from_coords(dims: GridDims, coords: &[(usize, usize, usize)]) -> Result<Self> {
        let mut indices = Vec::with_capacity(coords.len());
        for &(x, y, z) in coords {
            if x >= dims.w || y >= dims.h || z >= dims.d {
                return Err(Error::InvalidValue(format!(
                    "voxel ({x}, {y}, {z}) outside grid {:?}",
                    dims.as_array()
                )));
            }
            indices.push(dims.index(z, y, x));
        }
        Ok(Self::from_indices(dims, indices))
    }

    pub fn from_indices(dims: GridDims, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        debug_assert!(indices.last().map_or(true, |&i| i < dims.len()));
        Self { dims, indices }
    }

    pub(crate) fn from_sorted_unchecked(dims: GridDims, indices: Vec<usize>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self { dims, indices }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains_index(&self, idx: usize) -> bool {
        self.indices.binary_search(&idx).is_ok()
    }

    /// Members as `(x, y, z)` in ascending `(z, y, x)` order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.indices.iter().map(|&i| {
            let (z, y, x) = self.dims.coords(i);
            (x, y, z)
        })
    }

    /// Dense membership mask over the grid.
    pub fn to_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.dims.len()];
        for &i in &self.indices {
            mask[i] = true;
        }
        mask
    }
}

/// Multi-channel `f64` grid, channel-major: `data[c * dims.len() + idx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid {
    channels: usize,
    dims: GridDims,
    data: Vec<f64>,
}

impl ChannelGrid {
    pub fn new(channels: usize, dims: GridDims, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != channels * dims.len() {
            return Err(Error::Shape(format!(
                "channel grid expects {channels} x {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-voxel argmax over channels, ties toward the lower channel.
    pub fn argmax_labels(&self) -> LabelVolume {
        let n = self.dims.len();
        let mut out = vec![0u8; n];
        for (i, slot) in out.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_v = self.data[i];
            for c in 1..self.channels {
                let v = self.data[c * n + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            *slot = best as u8;
        }
        LabelVolume {
            dims: self.dims,
            num_classes: self.channels as u8,
            data: out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_reject_thin_axes() {
        assert!(GridDims::new(1, 4, 4).is_err());
        assert!(GridDims::new(4, 4, 2).is_ok());
    }

    #[test]
    fn index_round_trips() {
        let dims = GridDims::new(3, 4, 5).unwrap();
        for i in 0..dims.len() {
            let (z, y, x) = dims.coords(i);
            assert_eq!(dims.index(z, y, x), i);
        }
        assert_eq!(dims.index(1, 2, 3), (4 + 2) * 5 + 3);
    }

    #[test]
    fn label_volume_rejects_out_of_range_classes() {
        let dims = GridDims::cube(2).unwrap();
        let mut data = vec![0u8; 8];
        data[3] = 5;
        assert!(LabelVolume::new(dims, 5, data.clone()).is_err());
        assert!(LabelVolume::new(dims, 6, data).is_ok());
    }

    #[test]
    fn scalar_volume_rejects_nan() {
        let dims = GridDims::cube(2).unwrap();
        let mut data = vec![0f32; 8];
        data[0] = f32::NAN;
        assert!(ScalarVolume::new(dims, data).is_err());
    }

    #[test]
    fn voxel_set_dedups_and_orders_by_zyx() {
        let dims = GridDims::cube(4).unwrap();
        let set = VoxelSet::from_coords(dims, &[(1, 0, 2), (3, 3, 0), (1, 0, 2)]).unwrap();
        assert_eq!(set.len(), 2);
        let coords: Vec<_> = set.coords().collect();
        assert_eq!(coords, vec![(3, 3, 0), (1, 0, 2)]);
        assert!(VoxelSet::from_coords(dims, &[(4, 0, 0)]).is_err());
    }

    #[test]
    fn norm_coord_clamps() {
        let p = NormCoord::new(-3.0, 0.25, f64::NAN);
        assert_eq!(p.as_array(), [-1.0, 0.25, 0.0]);
    }
}
