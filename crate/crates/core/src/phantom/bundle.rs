//! Subject bundle directories: one SVOL file per volume plus `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_phantom, PhantomSpec, Subject};
use crate::volume::{svol, GridDims, LabelVolume};
use crate::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const IMAGE_FILE: &str = "image.svol";
pub const LOBES_FILE: &str = "lobes.svol";
pub const SEGMENTS_FILE: &str = "segments.svol";
pub const BRONCHI_FILE: &str = "bronchi.svol";
pub const ARTERY_FILE: &str = "artery.svol";
pub const VEIN_FILE: &str = "vein.svol";
pub const ISV_FILE: &str = "isv.svol";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub num_classes: u8,
    pub class_names: Vec<String>,
    pub generator_spec: PhantomSpec,
}

pub fn save_subject(subject: &Subject, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = BundleMeta {
        dims: subject.dims().as_array(),
        spacing_mm: [1.0; 3],
        num_classes: subject.num_classes(),
        class_names: subject.spec.class_names(),
        generator_spec: subject.spec.clone(),
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    svol::write_scalar(&dir.join(IMAGE_FILE), &subject.image)?;
    for (name, vol) in [
        (LOBES_FILE, &subject.lobes),
        (SEGMENTS_FILE, &subject.segments),
        (BRONCHI_FILE, &subject.bronchi),
        (ARTERY_FILE, &subject.artery),
        (VEIN_FILE, &subject.vein),
        (ISV_FILE, &subject.intersegmental_vein),
    ] {
        svol::write_labels(&dir.join(name), vol)?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<BundleMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}

fn check_dims(expected: GridDims, got: GridDims, file: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Consistency(format!(
            "{file} has dims {:?} but meta.json declares {:?}",
            got.as_array(),
            expected.as_array()
        )));
    }
    Ok(())
}

pub fn load_subject(dir: &Path) -> Result<Subject> {
    let meta = read_meta(dir)?;
    let spec = meta.generator_spec.clone();
    let dims = GridDims::new(meta.dims[0], meta.dims[1], meta.dims[2])
        .map_err(|e| Error::Consistency(e.to_string()))?;
    if meta.num_classes != spec.num_classes() || meta.class_names.len() != meta.num_classes as usize {
        return Err(Error::Consistency(format!(
            "meta.json num_classes {} disagrees with generator spec ({}) or class names ({})",
            meta.num_classes,
            spec.num_classes(),
            meta.class_names.len()
        )));
    }
    if meta.dims != spec.dims {
        return Err(Error::Consistency(format!(
            "meta.json dims {:?} disagree with generator spec {:?}",
            meta.dims, spec.dims
        )));
    }
    let image = svol::read_scalar(&dir.join(IMAGE_FILE))?;
    check_dims(dims, image.dims(), IMAGE_FILE)?;
    let labels = |file: &str, classes: u8| -> Result<LabelVolume> {
        let v = svol::read_labels(&dir.join(file), classes)?;
        check_dims(dims, v.dims(), file)?;
        Ok(v)
    };
    let k = meta.num_classes;
    Ok(Subject {
        lobes: labels(LOBES_FILE, (spec.num_lobes + 1) as u8)?,
        segments: labels(SEGMENTS_FILE, k)?,
        bronchi: labels(BRONCHI_FILE, k)?,
        artery: labels(ARTERY_FILE, k)?,
        vein: labels(VEIN_FILE, k)?,
        intersegmental_vein: labels(ISV_FILE, 2)?,
        image,
        spec,
    })
}

pub fn subject_id(index: usize) -> String {
    format!("subject_{index:04}")
}

/// Writes `count` subjects under `root`, subject `i` seeded with `base.seed + i`.
pub fn generate_dataset(root: &Path, count: usize, base: &PhantomSpec) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec {
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let id = subject_id(i);
        save_subject(&generate_phantom(&spec)?, &root.join(&id))?;
        ids.push(id);
    }
    Ok(ids)
}

/// Sorted names of the bundle directories directly under `root`.
pub fn list_subjects(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path: PathBuf = entry.path();
        if path.join(META_FILE).is_file() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}
