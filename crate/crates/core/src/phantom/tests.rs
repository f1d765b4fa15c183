use super::*;
use crate::volume::svol;

fn small(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        dims: [32, 32, 32],
        ..PhantomSpec::default()
    }
}

/// Exhaustive scan: every class-i voxel of `tree` lies in segment i.
fn trees_inside_segments(s: &Subject, tree: &LabelVolume) -> bool {
    tree.data()
        .iter()
        .zip(s.segments.data())
        .all(|(&t, &g)| t == 0 || t == g)
}

#[test]
fn deterministic_per_seed() {
    let a = generate_phantom(&small(4)).unwrap();
    let b = generate_phantom(&small(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.segments, generate_phantom(&small(5)).unwrap().segments);
}

#[test]
fn default_spec_satisfies_anatomy_invariants() {
    for seed in 0..3 {
        let s = generate_phantom(&PhantomSpec::with_seed(seed)).unwrap();
        assert_eq!(s.dims(), GridDims::cube(48).unwrap());
        assert!(trees_inside_segments(&s, &s.bronchi));
        assert!(trees_inside_segments(&s, &s.artery));
        assert!(trees_inside_segments(&s, &s.vein));
        for i in 0..s.dims().len() {
            // segments refine lobes, lobes are covered by segments
            assert_eq!(s.segments.data()[i] == 0, s.lobes.data()[i] == 0);
            if s.segments.data()[i] != 0 {
                let lobe = (s.segments.data()[i] as usize - 1) / s.spec.segments_per_lobe + 1;
                assert_eq!(s.lobes.data()[i] as usize, lobe);
            }
            if s.intersegmental_vein.data()[i] != 0 {
                assert_ne!(s.vein.data()[i], 0);
            }
        }
        for cls in 1..s.num_classes() {
            assert!(s.segments.count(cls) > 0, "seed {seed} class {cls}");
            assert!(s.bronchi.count(cls) > 0, "seed {seed} class {cls}");
            assert!(s.artery.count(cls) > 0, "seed {seed} class {cls}");
        }
        assert!(s.intersegmental_vein.count(1) > 0);
        assert!(s.image.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn single_segment_lobes_equal_lobes() {
    let spec = PhantomSpec {
        segments_per_lobe: 1,
        ..small(2)
    };
    let s = generate_phantom(&spec).unwrap();
    assert_eq!(s.segments.data(), s.lobes.data());
}

#[test]
fn invalid_and_infeasible_specs() {
    let bad = [
        PhantomSpec { num_lobes: 0, ..small(0) },
        PhantomSpec { tree_depth: 1, ..small(0) },
        PhantomSpec { branch_radius: 0.5, ..small(0) },
        PhantomSpec { noise_std: -1.0, ..small(0) },
        PhantomSpec { num_lobes: 4, segments_per_lobe: 5, ..small(0) },
    ];
    for spec in bad {
        assert!(matches!(generate_phantom(&spec), Err(Error::InvalidValue(_))), "{spec:?}");
    }
    let tiny = PhantomSpec { dims: [8, 8, 8], ..small(0) };
    assert!(matches!(generate_phantom(&tiny), Err(Error::Infeasible(_))));
    let crowded = PhantomSpec { num_lobes: 5, dims: [32, 32, 32], ..small(0) };
    assert!(matches!(generate_phantom(&crowded), Err(Error::Infeasible(_))));
}

#[test]
fn bundle_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_phantom(&small(7)).unwrap();
    save_subject(&s, dir.path()).unwrap();
    let back = load_subject(dir.path()).unwrap();
    assert_eq!(back, s);
    let image_bytes = std::fs::read(dir.path().join(bundle::IMAGE_FILE)).unwrap();
    assert_eq!(image_bytes, svol::encode_scalar(&s.image));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(bundle::META_FILE)).unwrap()).unwrap();
    for key in ["dims", "spacing_mm", "num_classes", "class_names", "generator_spec"] {
        assert!(meta.get(key).is_some(), "{key}");
    }
}

#[test]
fn bundle_errors_are_distinct() {
    let s = generate_phantom(&small(8)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_subject(&s, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(bundle::VEIN_FILE)).unwrap();
    assert!(matches!(load_subject(dir.path()), Err(Error::MissingFile(_))));

    let dir = tempfile::tempdir().unwrap();
    save_subject(&s, dir.path()).unwrap();
    let p = dir.path().join(bundle::SEGMENTS_FILE);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(load_subject(dir.path()), Err(Error::Format { .. })));

    let dir = tempfile::tempdir().unwrap();
    save_subject(&s, dir.path()).unwrap();
    let p = dir.path().join(bundle::META_FILE);
    let mut meta = bundle::read_meta(dir.path()).unwrap();
    meta.dims = [32, 32, 30];
    meta.generator_spec.dims = [32, 32, 30];
    std::fs::write(&p, serde_json::to_string(&meta).unwrap()).unwrap();
    assert!(matches!(load_subject(dir.path()), Err(Error::Consistency(_))));

    std::fs::write(&p, "{ not json").unwrap();
    assert!(matches!(load_subject(dir.path()), Err(Error::Json { .. })));
}

#[test]
fn dataset_generation_and_listing() {
    let dir = tempfile::tempdir().unwrap();
    let ids = generate_dataset(dir.path(), 3, &small(100)).unwrap();
    assert_eq!(list_subjects(dir.path()).unwrap(), ids);
    let second = load_subject(&dir.path().join(&ids[1])).unwrap();
    assert_eq!(second.spec.seed, 101);
}

#[test]
fn corruption_rate_and_identity() {
    let s = generate_phantom(&small(3)).unwrap();
    assert_eq!(corrupt_shapes(&s, 0.0), s);

    let c = corrupt_shapes(&s, 0.1);
    assert_eq!(c, corrupt_shapes(&s, 0.1));
    for (orig, new) in [(&s.bronchi, &c.bronchi), (&s.artery, &c.artery), (&s.vein, &c.vein)] {
        let candidates = corrupt::boundary_candidates(orig).len();
        let changed = orig.data().iter().zip(new.data()).filter(|(a, b)| a != b).count();
        let frac = changed as f64 / candidates as f64;
        assert!((frac - 0.1).abs() <= 0.03, "altered fraction {frac}");
        for cls in 1..orig.num_classes() {
            assert!(new.count(cls) > 0);
        }
    }
    assert!(c
        .intersegmental_vein
        .data()
        .iter()
        .zip(c.vein.data())
        .all(|(&i, &v)| i == 0 || v != 0));
}
