//! Exhaustive reference implementations of every metric. Quadratic in the
//! number of voxels, so restricted to small grids.

use std::collections::BTreeMap;

use super::{dice_from_counts, BranchRecord, MetricsReport, VEIN_EXCLUSION_NOTE};
use crate::phantom::Subject;
use crate::volume::{GridDims, LabelVolume};
use crate::{Error, Result};

/// 16³.
pub const ORACLE_MAX_VOXELS: usize = 4096;

type Coord = (i64, i64, i64);

fn coord(dims: GridDims, i: usize) -> Coord {
    let (z, y, x) = dims.coords(i);
    (z as i64, y as i64, x as i64)
}

fn dist(a: Coord, b: Coord) -> f64 {
    let (dz, dy, dx) = (a.0 - b.0, a.1 - b.1, a.2 - b.2);
    ((dz * dz + dy * dy + dx * dx) as f64).sqrt()
}

fn label_at(vol: &LabelVolume, c: Coord) -> Option<u8> {
    let d = vol.dims();
    if c.0 < 0 || c.1 < 0 || c.2 < 0 || c.0 >= d.d as i64 || c.1 >= d.h as i64 || c.2 >= d.w as i64 {
        None
    } else {
        Some(vol.get(c.0 as usize, c.1 as usize, c.2 as usize))
    }
}

fn surface(vol: &LabelVolume, cls: u8) -> Vec<Coord> {
    let mut out = Vec::new();
    for i in 0..vol.dims().len() {
        let c = coord(vol.dims(), i);
        if label_at(vol, c) != Some(cls) {
            continue;
        }
        let faces = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        if faces
            .iter()
            .any(|f| label_at(vol, (c.0 + f.0, c.1 + f.1, c.2 + f.2)) != Some(cls))
        {
            out.push(c);
        }
    }
    out
}

fn min_dist(p: Coord, set: &[Coord]) -> f64 {
    set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

fn nsd(gt: &LabelVolume, pred: &LabelVolume, cls: u8, tau: f64) -> f64 {
    let s = surface(gt, cls);
    let s_hat = surface(pred, cls);
    if s.is_empty() && s_hat.is_empty() {
        return 1.0;
    }
    let a = s.iter().filter(|&&p| min_dist(p, &s_hat) <= tau).count();
    let b = s_hat.iter().filter(|&&p| min_dist(p, &s) <= tau).count();
    (a + b) as f64 / (s.len() + s_hat.len()) as f64
}

/// Flood fill with an explicit stack; groups come out in scan order of their
/// first voxel.
fn flood_components(dims: GridDims, member: &[bool]) -> Vec<Vec<Coord>> {
    let mut seen = vec![false; member.len()];
    let mut out = Vec::new();
    for start in 0..member.len() {
        if !member[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut group = Vec::new();
        while let Some(i) = stack.pop() {
            let c = coord(dims, i);
            group.push(c);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let n = (c.0 + dz, c.1 + dy, c.2 + dx);
                        if !dims.contains(n.0, n.1, n.2) {
                            continue;
                        }
                        let j = dims.index(n.0 as usize, n.1 as usize, n.2 as usize);
                        if member[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        out.push(group);
    }
    out
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Recomputes every metric of [`super::evaluate_volumes`] by brute force.
pub fn brute_force_volumes(
    segments: &LabelVolume,
    bronchi: &LabelVolume,
    artery: &LabelVolume,
    pred: &LabelVolume,
    tau: f64,
) -> Result<MetricsReport> {
    let dims = segments.dims();
    for v in [bronchi, artery, pred] {
        if v.dims() != dims {
            return Err(Error::DimsMismatch(format!("{:?} vs {:?}", dims.as_array(), v.dims().as_array())));
        }
    }
    if dims.len() > ORACLE_MAX_VOXELS {
        return Err(Error::VolumeTooLarge(dims.len()));
    }
    let classes: Vec<u8> = (1..segments.num_classes()).collect();

    let mut per_class_dice = BTreeMap::new();
    let mut nsds = Vec::new();
    for &c in &classes {
        let mut inter = 0;
        let mut ng = 0;
        let mut np = 0;
        for i in 0..dims.len() {
            let g = segments.data()[i] == c;
            let p = pred.data()[i] == c;
            ng += g as usize;
            np += p as usize;
            inter += (g && p) as usize;
        }
        per_class_dice.insert(c, dice_from_counts(inter, ng, np));
        nsds.push(nsd(segments, pred, c, tau));
    }
    let dice_values: Vec<f64> = per_class_dice.values().copied().collect();

    let mut branches = Vec::new();
    let mut summary = |name: &str, tree: &LabelVolume| {
        let mut count = 0;
        let mut defined = Vec::new();
        let mut undefined = 0;
        for &c in &classes {
            let member: Vec<bool> = (0..dims.len())
                .map(|i| tree.data()[i] == c && pred.data()[i] != c)
                .collect();
            let surf = surface(pred, c);
            for group in flood_components(dims, &member) {
                count += 1;
                let d = (!surf.is_empty())
                    .then(|| group.iter().map(|&p| min_dist(p, &surf)).fold(0.0, f64::max));
                match d {
                    Some(v) => defined.push(v),
                    None => undefined += 1,
                }
                branches.push(BranchRecord {
                    tree: name.to_string(),
                    class: c,
                    size: group.len(),
                    distance: d,
                });
            }
        }
        (count, mean(&defined), undefined)
    };
    let (nib, idb, ub) = summary("bronchi", bronchi);
    let (nia, ida, ua) = summary("artery", artery);

    Ok(MetricsReport {
        per_class_dice,
        dice_macro: mean(&dice_values).unwrap_or(1.0),
        nsd: mean(&nsds).unwrap_or(1.0),
        tau,
        nib,
        idb,
        nia,
        ida,
        undefined_distance_branches: ub + ua,
        branches,
        excluded: VEIN_EXCLUSION_NOTE.to_string(),
    })
}

/// Brute-force counterpart of [`super::evaluate_subject`].
pub fn brute_force_oracles(gt: &Subject, pred: &LabelVolume, tau: f64) -> Result<MetricsReport> {
    brute_force_volumes(&gt.segments, &gt.bronchi, &gt.artery, pred, tau)
}
