//! Voxel-level (Dice, surface Dice) and anatomy-level (intrusion count and
//! distance) evaluation of predicted segment volumes.
//!
//! Intrusion metrics are computed for bronchi and arteries only; veins run
//! along segment boundaries and are excluded.

mod oracle;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::phantom::Subject;
use crate::volume::{
    connected_components, squared_distance_transform, surface_voxels, Connectivity, LabelVolume, VoxelSet,
};
use crate::{Error, Result};

pub use oracle::{brute_force_oracles, brute_force_volumes, ORACLE_MAX_VOXELS};

/// Default surface tolerance of NSD, in voxels.
pub const DEFAULT_TAU: f64 = 1.0;

pub const VEIN_EXCLUSION_NOTE: &str = "veins excluded from intrusion metrics";

fn check_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch(format!(
            "{:?} vs {:?}",
            a.dims().as_array(),
            b.dims().as_array()
        )));
    }
    Ok(())
}

/// `2|Y ∩ Ŷ| / (|Y| + |Ŷ|)` for one class; 1 when both sets are empty.
pub fn dice(gt: &LabelVolume, pred: &LabelVolume, cls: u8) -> Result<f64> {
    check_dims(gt, pred)?;
    let (mut inter, mut ng, mut np) = (0usize, 0usize, 0usize);
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        let (a, b) = (g == cls, p == cls);
        ng += a as usize;
        np += b as usize;
        inter += (a && b) as usize;
    }
    Ok(dice_from_counts(inter, ng, np))
}

pub(crate) fn dice_from_counts(inter: usize, ng: usize, np: usize) -> f64 {
    if ng + np == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (ng + np) as f64
    }
}

/// Foreground classes `1..num_classes` of the ground truth.
pub fn foreground_classes(gt: &LabelVolume) -> impl Iterator<Item = u8> {
    1..gt.num_classes()
}

/// Dice of every foreground class.
pub fn per_class_dice(gt: &LabelVolume, pred: &LabelVolume) -> Result<BTreeMap<u8, f64>> {
    check_dims(gt, pred)?;
    let k = gt.num_classes() as usize;
    let mut inter = vec![0usize; k.max(256)];
    let mut ng = vec![0usize; k.max(256)];
    let mut np = vec![0usize; 256];
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        ng[g as usize] += 1;
        np[p as usize] += 1;
        if g == p {
            inter[g as usize] += 1;
        }
    }
    Ok(foreground_classes(gt)
        .map(|c| (c, dice_from_counts(inter[c as usize], ng[c as usize], np[c as usize])))
        .collect())
}

/// Mean Dice over foreground classes.
pub fn dice_macro(gt: &LabelVolume, pred: &LabelVolume) -> Result<f64> {
    let per = per_class_dice(gt, pred)?;
    Ok(mean(per.values().copied()).unwrap_or(1.0))
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Fraction of surface voxels of each volume lying within `tau` (Euclidean,
/// voxel units) of the other volume's surface.
pub fn nsd(gt: &LabelVolume, pred: &LabelVolume, cls: u8, tau: f64) -> Result<f64> {
    check_dims(gt, pred)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidValue(format!("NSD tolerance must be >= 0, got {tau}")));
    }
    let s = surface_voxels(gt, cls);
    let s_hat = surface_voxels(pred, cls);
    if s.is_empty() && s_hat.is_empty() {
        return Ok(1.0);
    }
    let near = |from: &VoxelSet, to: &VoxelSet| -> usize {
        if to.is_empty() {
            return 0;
        }
        let dist = squared_distance_transform(to.dims(), &to.to_mask());
        from.indices().iter().filter(|&&i| dist[i].sqrt() <= tau).count()
    };
    let hits = near(&s, &s_hat) + near(&s_hat, &s);
    Ok(hits as f64 / (s.len() + s_hat.len()) as f64)
}

/// Mean NSD over foreground classes.
pub fn nsd_macro(gt: &LabelVolume, pred: &LabelVolume, tau: f64) -> Result<f64> {
    let mut vals = Vec::new();
    for c in foreground_classes(gt) {
        vals.push(nsd(gt, pred, c, tau)?);
    }
    Ok(mean(vals.into_iter()).unwrap_or(1.0))
}

/// A connected group of class-`class` tree voxels outside predicted segment `class`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrusionBranch {
    pub class: u8,
    pub voxels: VoxelSet,
    /// `None` when the predicted segment is empty and has no surface.
    pub distance: Option<f64>,
}

fn surface_distance(pred_segments: &LabelVolume, cls: u8) -> Option<Vec<f64>> {
    let surface = surface_voxels(pred_segments, cls);
    if surface.is_empty() {
        return None;
    }
    Some(squared_distance_transform(surface.dims(), &surface.to_mask()))
}

fn furthest(voxels: &VoxelSet, dist_sq: &[f64]) -> f64 {
    voxels
        .indices()
        .iter()
        .map(|&i| dist_sq[i].sqrt())
        .fold(0.0, f64::max)
}

/// Intrusion branches of class `cls`: 26-connected groups of the tree voxels
/// of that class lying outside the predicted segment of that class.
pub fn intrusion_branches(tree: &LabelVolume, pred_segments: &LabelVolume, cls: u8) -> Result<Vec<IntrusionBranch>> {
    check_dims(tree, pred_segments)?;
    let outside: Vec<usize> = tree
        .data()
        .iter()
        .zip(pred_segments.data())
        .enumerate()
        .filter(|(_, (&t, &p))| t == cls && p != cls)
        .map(|(i, _)| i)
        .collect();
    if outside.is_empty() {
        return Ok(Vec::new());
    }
    let mask = VoxelSet::from_indices(tree.dims(), outside);
    let dist = surface_distance(pred_segments, cls);
    Ok(connected_components(&mask, Connectivity::TwentySix)
        .into_iter()
        .map(|voxels| IntrusionBranch {
            class: cls,
            distance: dist.as_ref().map(|d| furthest(&voxels, d)),
            voxels,
        })
        .collect())
}

/// Largest distance from a branch voxel to the nearest surface voxel of the
/// branch's predicted segment; `None` if that segment is empty.
pub fn intrusion_distance(branch: &IntrusionBranch, pred_segments: &LabelVolume) -> Option<f64> {
    surface_distance(pred_segments, branch.class).map(|d| furthest(&branch.voxels, &d))
}

/// One intrusion branch in a report dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub tree: String,
    pub class: u8,
    pub size: usize,
    pub distance: Option<f64>,
}

/// Per-subject evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_dice: BTreeMap<u8, f64>,
    pub dice_macro: f64,
    pub nsd: f64,
    pub tau: f64,
    pub nib: usize,
    pub idb: Option<f64>,
    pub nia: usize,
    pub ida: Option<f64>,
    /// Branches counted in NIB/NIA whose predicted segment was empty.
    pub undefined_distance_branches: usize,
    pub branches: Vec<BranchRecord>,
    pub excluded: String,
}

impl MetricsReport {
    /// Sum of all defined intrusion distances over bronchi and arteries
    /// (equivalently `NI x mean ID` summed over both trees).
    pub fn total_intrusion_distance(&self) -> f64 {
        self.branches.iter().filter_map(|b| b.distance).sum()
    }

    pub const CSV_HEADER: &'static str = "subject,dice_macro,nsd,nib,idb,nia,ida";

    pub fn csv_row(&self, subject: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{subject},{:.6},{:.6},{},{},{},{}",
            self.dice_macro,
            self.nsd,
            self.nib,
            opt(self.idb),
            self.nia,
            opt(self.ida)
        )
    }

    /// Per-branch dump as CSV.
    pub fn branches_csv(&self) -> String {
        let mut out = String::from("tree,class,size,distance\n");
        for b in &self.branches {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                b.tree,
                b.class,
                b.size,
                b.distance.map(|d| format!("{d:.6}")).unwrap_or_default()
            );
        }
        out
    }
}

struct TreeSummary {
    count: usize,
    mean_distance: Option<f64>,
    undefined: usize,
}

fn summarize_tree(
    name: &str,
    tree: &LabelVolume,
    pred: &LabelVolume,
    classes: &[u8],
    records: &mut Vec<BranchRecord>,
) -> Result<TreeSummary> {
    let mut count = 0;
    let mut undefined = 0;
    let mut distances = Vec::new();
    for &c in classes {
        for b in intrusion_branches(tree, pred, c)? {
            count += 1;
            match b.distance {
                Some(d) => distances.push(d),
                None => undefined += 1,
            }
            records.push(BranchRecord {
                tree: name.to_string(),
                class: c,
                size: b.voxels.len(),
                distance: b.distance,
            });
        }
    }
    Ok(TreeSummary {
        count,
        mean_distance: mean(distances.into_iter()),
        undefined,
    })
}

/// Full metric suite from the ground-truth volumes.
pub fn evaluate_volumes(
    segments: &LabelVolume,
    bronchi: &LabelVolume,
    artery: &LabelVolume,
    pred: &LabelVolume,
    tau: f64,
) -> Result<MetricsReport> {
    check_dims(segments, pred)?;
    check_dims(segments, bronchi)?;
    check_dims(segments, artery)?;
    let per_class_dice = per_class_dice(segments, pred)?;
    let dice_macro = mean(per_class_dice.values().copied()).unwrap_or(1.0);
    let nsd = nsd_macro(segments, pred, tau)?;
    let classes: Vec<u8> = foreground_classes(segments).collect();
    let mut branches = Vec::new();
    let b = summarize_tree("bronchi", bronchi, pred, &classes, &mut branches)?;
    let a = summarize_tree("artery", artery, pred, &classes, &mut branches)?;
    Ok(MetricsReport {
        per_class_dice,
        dice_macro,
        nsd,
        tau,
        nib: b.count,
        idb: b.mean_distance,
        nia: a.count,
        ida: a.mean_distance,
        undefined_distance_branches: b.undefined + a.undefined,
        branches,
        excluded: VEIN_EXCLUSION_NOTE.to_string(),
    })
}

/// Evaluates a predicted segment volume against a subject's annotations.
pub fn evaluate_subject(gt: &Subject, pred: &LabelVolume, tau: f64) -> Result<MetricsReport> {
    evaluate_volumes(&gt.segments, &gt.bronchi, &gt.artery, pred, tau)
}
