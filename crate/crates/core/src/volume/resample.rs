use super::{interp, GridDims, LabelVolume, NormCoord, ScalarVolume};
use crate::{Error, Result};

fn check_target(source: GridDims, target: GridDims) -> Result<()> {
    let s = source.as_array();
    let t = target.as_array();
    if t.iter().any(|&v| v < 2) {
        return Err(Error::InvalidDims(t));
    }
    if t.iter().zip(&s).any(|(t, s)| t > s) {
        return Err(Error::DimsMismatch(format!(
            "downsample target {t:?} exceeds source {s:?}"
        )));
    }
    Ok(())
}

/// Nearest-neighbor resampling of labels at the target voxel centers.
pub fn downsample_labels(labels: &LabelVolume, target: GridDims) -> Result<LabelVolume> {
    check_target(labels.dims(), target)?;
    let mut data = Vec::with_capacity(target.len());
    for z in 0..target.d {
        let pz = interp::voxel_center_coord(z, target.d);
        for y in 0..target.h {
            let py = interp::voxel_center_coord(y, target.h);
            for x in 0..target.w {
                let px = interp::voxel_center_coord(x, target.w);
                data.push(interp::nearest_label(labels, NormCoord::new(px, py, pz)));
            }
        }
    }
    LabelVolume::new(target, labels.num_classes(), data)
}

/// Source index range `[start, end)` covered by target cell `j`.
fn block(j: usize, target: usize, source: usize) -> (usize, usize) {
    let start = j * source / target;
    let end = ((j + 1) * source / target).max(start + 1);
    (start, end)
}

/// Box-mean resampling: each target voxel averages the block of source voxels
/// it covers when both grids tile the same extent.
pub fn downsample_scalar(volume: &ScalarVolume, target: GridDims) -> Result<ScalarVolume> {
    let source = volume.dims();
    check_target(source, target)?;
    if source == target {
        return Ok(volume.clone());
    }
    let src = volume.data();
    let mut data = Vec::with_capacity(target.len());
    for z in 0..target.d {
        let (z0, z1) = block(z, target.d, source.d);
        for y in 0..target.h {
            let (y0, y1) = block(y, target.h, source.h);
            for x in 0..target.w {
                let (x0, x1) = block(x, target.w, source.w);
                let mut acc = 0f64;
                for sz in z0..z1 {
                    for sy in y0..y1 {
                        for sx in x0..x1 {
                            acc += src[source.index(sz, sy, sx)] as f64;
                        }
                    }
                }
                let count = ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64;
                data.push((acc / count) as f32);
            }
        }
    }
    ScalarVolume::new(target, data)
}
