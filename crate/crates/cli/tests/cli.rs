use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use segfield::metrics::MetricsReport;
use segfield::volume::svol::{self, SvolData};
use segfield_cli::{RunManifest, RunStatus, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};

fn segfield(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segfield"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str]) {
    let out = segfield(workdir, args);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(key, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn without_manifest(mut files: BTreeMap<String, Vec<u8>>) -> BTreeMap<String, Vec<u8>> {
    files.remove("manifest.json");
    files
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn phantom_runs_are_byte_identical_and_replayable() {
    let wd = tempfile::tempdir().unwrap();
    let w = wd.path();
    ok(w, &["phantom", "--n", "10", "--dims", "32", "--seed", "7", "--out", "a"]);
    ok(w, &["phantom", "--n", "10", "--dims", "32", "--seed", "7", "--out", "b"]);
    let a = without_manifest(snapshot(&w.join("a")));
    assert_eq!(a, without_manifest(snapshot(&w.join("b"))));
    assert!(a.contains_key("split.json"));
    assert_eq!(a.keys().filter(|k| k.ends_with("meta.json")).count(), 10);

    let m = manifest(&w.join("a"));
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.seed, Some(7));
    assert!(m.wall_seconds.is_some());
    assert_eq!(m.artifacts.len(), 11);

    // the manifest alone re-creates the run
    fs::remove_dir_all(w.join("a")).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_segfield"))
        .args(&m.argv[1..])
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(without_manifest(snapshot(&w.join("a"))), a);
}

#[test]
fn evaluating_ground_truth_against_itself() {
    let wd = tempfile::tempdir().unwrap();
    let w = wd.path();
    ok(w, &["phantom", "--n", "2", "--dims", "32", "--seed", "3", "--out", "data"]);
    ok(w, &["eval", "--gt", "data/subject_0001", "--pred", "data/subject_0001/segments.svol", "--out", "ev"]);
    let report: MetricsReport =
        serde_json::from_str(&fs::read_to_string(w.join("ev/report_subject_0001.json")).unwrap()).unwrap();
    assert_eq!(report.dice_macro, 1.0);
    assert_eq!(report.nsd, 1.0);
    assert_eq!((report.nib, report.nia), (0, 0));
    let csv = fs::read_to_string(w.join("ev/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    ok(
        w,
        &[
            "export",
            "--labels",
            "data/subject_0001/segments.svol",
            "--reports",
            "ev/report_subject_0001.json",
            "--out",
            "ex",
        ],
    );
    for c in 1..=4 {
        let obj = fs::read_to_string(w.join(format!("ex/class_{c:02}.obj"))).unwrap();
        assert!(obj.lines().any(|l| l.starts_with("f ")));
    }
    assert_eq!(fs::read_to_string(w.join("ex/metrics.csv")).unwrap(), csv);
}

#[test]
fn pipeline_from_phantoms_to_upsampled_prediction() {
    let wd = tempfile::tempdir().unwrap();
    let w = wd.path();
    ok(w, &["phantom", "--n", "10", "--dims", "32", "--seed", "1", "--out", "data"]);
    let before = snapshot(&w.join("data"));
    ok(w, &["pretrain", "--data", "data", "--epochs", "2", "--steps", "3", "--out", "tpl"]);
    ok(
        w,
        &[
            "train", "--data", "data", "--template-ckpt", "tpl/template.snn", "--epochs", "1", "--points", "128",
            "--gamma", "0.5", "--seed", "2", "--out", "run",
        ],
    );
    for f in ["model.json", "train_config.json", "train_log.ndjson", "best.snn", "last.snn"] {
        assert!(w.join("run").join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(w.join("run/train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);

    ok(w, &["infer", "--model", "run", "--subject", "data/subject_0009", "--out-dims", "64", "--out", "pred"]);
    match svol::read(&w.join("pred/subject_0009.svol")).unwrap() {
        SvolData::Labels { dims, data } => {
            assert_eq!(dims.as_array(), [64, 64, 64]);
            assert_eq!(data.len(), 64 * 64 * 64);
            assert!(data.iter().all(|&v| v <= 4));
        }
        SvolData::Scalar { .. } => panic!("expected labels"),
    }
    ok(w, &["infer", "--model", "run", "--subject", "data/subject_0009", "--out", "pred32"]);
    ok(w, &["eval", "--gt", "data/subject_0009", "--pred", "pred32/subject_0009.svol", "--out", "ev"]);
    assert_eq!(snapshot(&w.join("data")), before, "inputs were modified");

    // a template for a different class count is rejected
    ok(w, &["phantom", "--n", "10", "--dims", "32", "--segments", "3", "--out", "data6"]);
    let out = segfield(w, &["train", "--data", "data6", "--template-ckpt", "tpl/template.snn", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(stderr(&out).contains("checkpoint mismatch"));
    assert_eq!(manifest(&w.join("bad")).status, RunStatus::Failed);

    // diverging optimisation surfaces as a numerical failure
    let out = segfield(
        w,
        &["train", "--data", "data", "--epochs", "3", "--points", "64", "--lr", "1e300", "--out", "nan"],
    );
    assert_eq!(out.status.code(), Some(EXIT_NUMERICAL), "{}", stderr(&out));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let wd = tempfile::tempdir().unwrap();
    let w = wd.path();
    let out = segfield(w, &["train", "--data", "x", "--unknown-flag"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(stderr(&out).contains("--unknown-flag"));

    let out = segfield(w, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));

    let out = segfield(w, &["eval", "--gt", "missing", "--pred", "missing.svol"]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(stderr(&out).contains("missing file"));

    let out = segfield(w, &["phantom", "--n", "2", "--dims", "8"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(stderr(&out).contains("infeasible"));

    ok(w, &["phantom", "--n", "1", "--dims", "16", "--out", "one"]);
    let out = segfield(w, &["phantom", "--n", "1", "--dims", "16", "--out", "one"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(stderr(&out).contains("not empty"));

    fs::write(w.join("junk.svol"), b"not a volume").unwrap();
    let out = segfield(w, &["eval", "--gt", "one/subject_0000", "--pred", "junk.svol", "--out", "e"]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(stderr(&out).contains("format error"));

    let out = Command::new(env!("CARGO_BIN_EXE_segfield"))
        .args(["--workdir", w.to_str().unwrap(), "phantom", "--n", "1", "--dims", "16", "--out", "t"])
        .env("SEGFIELD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));

    let out = Command::new(env!("CARGO_BIN_EXE_segfield"))
        .args(["--workdir", w.to_str().unwrap(), "phantom", "--n", "1", "--dims", "16", "--out", "t1"])
        .env("SEGFIELD_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert_eq!(manifest(&w.join("t1")).threads, 1);
}

#[test]
fn in_process_entry_point_matches_binary_codes() {
    assert_eq!(segfield_cli::run(["segfield", "--help"]), EXIT_OK);
    assert_eq!(segfield_cli::run(["segfield", "infer"]), EXIT_USAGE);
    let wd = tempfile::tempdir().unwrap();
    let w = wd.path().to_str().unwrap();
    assert_eq!(segfield_cli::run(["segfield", "--workdir", w, "export", "--out", "x"]), EXIT_USAGE);
}
