use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfsseg::codec::{read_checkpoint, step_stem, FeatureBlock};
use tempfile::TempDir;

fn cfsseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfsseg")).args(args).output().expect("spawn cfsseg")
}

fn ok(args: &[&str]) -> Output {
    let out = cfsseg(args);
    assert!(
        out.status.success(),
        "cfsseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn bin_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".bin"))
        .collect();
    names.sort();
    names
}

fn rel_frobenius(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

/// Metrics CSV with the wall-clock column removed.
fn csv_without_time(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn synth_is_reproducible_and_writes_one_file_per_step() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), "a", &["--seed", "1"]);
    let b = synth(tmp.path(), "b", &["--seed", "1"]);
    let names = bin_files(&a);
    assert_eq!(names.len(), 7, "{names:?}");
    assert!(names.contains(&"eval.bin".to_string()));
    for name in fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()) {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let c = synth(tmp.path(), "c", &["--seed", "2"]);
    assert_ne!(fs::read(a.join("step_001.bin")).unwrap(), fs::read(c.join("step_001.bin")).unwrap());
}

#[test]
fn grouping_does_not_change_the_final_classifier() {
    let tmp = TempDir::new().unwrap();
    let s1 = synth(tmp.path(), "s1", &["--seed", "3"]);
    let s5 = synth(tmp.path(), "s5", &["--seed", "3", "--n", "5"]);
    assert_eq!(bin_files(&s5).len(), 3);
    let r1 = tmp.path().join("r1");
    let r5 = tmp.path().join("r5");
    ok(&["run", "--stream", p(&s1), "--out", p(&r1)]);
    ok(&["run", "--stream", p(&s5), "--out", p(&r5)]);
    let a = read_checkpoint::<f64>(&r1.join("checkpoint.ckpt")).unwrap();
    let b = read_checkpoint::<f64>(&r5.join("checkpoint.ckpt")).unwrap();
    assert_eq!(a.class_ids(), b.class_ids());
    let d = rel_frobenius(&a.phi().to_owned(), &b.phi().to_owned());
    assert!(d <= 1e-9, "relative phi difference {d:e}");
}

#[test]
fn rerun_from_written_manifest_is_identical() {
    let tmp = TempDir::new().unwrap();
    let s = synth(tmp.path(), "s", &["--seed", "4", "--relabeler", "3d", "--setting", "disjoint"]);
    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    ok(&["run", "--stream", p(&s), "--out", p(&r1)]);
    let manifest = r1.join("manifest.json");
    ok(&["run", "--stream", p(&s), "--out", p(&r2), "--config", p(&manifest)]);
    assert_eq!(
        fs::read(r1.join("checkpoint.ckpt")).unwrap(),
        fs::read(r2.join("checkpoint.ckpt")).unwrap()
    );
    let rows = csv_without_time(&r1.join("metrics.csv"));
    assert_eq!(rows[0], "step,miou_base,miou_incremental,miou_all");
    assert_eq!(rows.len(), 7);
    assert_eq!(rows, csv_without_time(&r2.join("metrics.csv")));
}

#[test]
fn resume_matches_a_full_run() {
    let tmp = TempDir::new().unwrap();
    let s = synth(tmp.path(), "s", &["--seed", "5", "--m", "17", "--n", "1"]);
    let full = tmp.path().join("full");
    ok(&["run", "--stream", p(&s), "--out", p(&full)]);

    // a stream holding only the first step gives the checkpoint to resume from
    let head = tmp.path().join("head");
    fs::create_dir(&head).unwrap();
    for name in ["manifest.json", "eval.bin", "eval.json", "step_001.bin", "step_001.json"] {
        fs::copy(s.join(name), head.join(name)).unwrap();
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(s.join("manifest.json")).unwrap()).unwrap();
    let mut first = manifest.clone();
    first.as_object_mut().unwrap().remove("synth");
    first["schedule"] = serde_json::json!([manifest["schedule"][0]]);
    first["n_classes"] = serde_json::json!(18);
    fs::write(head.join("manifest.json"), serde_json::to_vec(&first).unwrap()).unwrap();
    let partial = tmp.path().join("partial");
    ok(&["run", "--stream", p(&head), "--out", p(&partial)]);

    let resumed = tmp.path().join("resumed");
    let ckpt = partial.join("checkpoint.ckpt");
    ok(&["run", "--stream", p(&s), "--out", p(&resumed), "--resume", p(&ckpt)]);
    assert_eq!(
        fs::read(full.join("checkpoint.ckpt")).unwrap(),
        fs::read(resumed.join("checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn eval_reports_the_final_step() {
    let tmp = TempDir::new().unwrap();
    let s = synth(tmp.path(), "s", &["--seed", "6"]);
    let r = tmp.path().join("r");
    ok(&["run", "--stream", p(&s), "--out", p(&r)]);
    let out = ok(&["eval", "--stream", p(&s), "--checkpoint", p(&r.join("checkpoint.ckpt"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["step"], 6);
    let confusion = v["metrics"]["confusion"].as_array().unwrap();
    assert_eq!(confusion.len(), 21);

    let run_json: serde_json::Value = serde_json::from_slice(&fs::read(r.join("metrics.json")).unwrap()).unwrap();
    let last = run_json["steps"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["metrics"]["confusion"], v["metrics"]["confusion"]);
}

#[test]
fn three_d_relabeler_without_coordinates_is_a_configuration_error() {
    let tmp = TempDir::new().unwrap();
    let s = synth(tmp.path(), "s", &["--seed", "7", "--setting", "disjoint"]);
    for t in 1..=6 {
        let stem = step_stem(t);
        let block = FeatureBlock::read(&s, &stem).unwrap();
        FeatureBlock::new(t, block.features, None, block.labels).unwrap().write(&s, &stem).unwrap();
    }
    let r = tmp.path().join("r");
    let out = cfsseg(&["run", "--stream", p(&s), "--out", p(&r), "--relabeler", "3d"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("coordinates"));
    ok(&["run", "--stream", p(&s), "--out", p(&r), "--relabeler", "2d"]);
}

#[test]
fn non_finite_features_are_a_numeric_error() {
    let tmp = TempDir::new().unwrap();
    let s = synth(tmp.path(), "s", &["--seed", "8"]);
    let stem = step_stem(3);
    let block = FeatureBlock::read(&s, &stem).unwrap();
    let mut features = block.features;
    features[[0, 0]] = f32::NAN;
    FeatureBlock::new(3, features, block.coords, block.labels).unwrap().write(&s, &stem).unwrap();
    let out = cfsseg(&["run", "--stream", p(&s), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("step 3"));
}

#[test]
fn unknown_manifest_key_is_a_configuration_error() {
    let tmp = TempDir::new().unwrap();
    let s = synth(tmp.path(), "s", &["--seed", "9"]);
    let mut manifest: serde_json::Value = serde_json::from_slice(&fs::read(s.join("manifest.json")).unwrap()).unwrap();
    manifest["learning_rate"] = serde_json::json!(0.1);
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let out = cfsseg(&["run", "--stream", p(&s), "--out", p(&tmp.path().join("r")), "--config", p(&cfg)]);
    assert_eq!(code(&out), 2);
    let out = cfsseg(&["run", "--stream", p(&s), "--out", p(&tmp.path().join("r")), "--gamma", "-1"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&cfsseg(&["run", "--bogus"])), 2);
}

#[test]
fn export_check_accepts_good_streams_and_rejects_damaged_ones() {
    let tmp = TempDir::new().unwrap();
    let s = synth(tmp.path(), "s", &["--seed", "10"]);
    let out = ok(&["export-check", p(&s)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["ok"], true);
    assert_eq!(v["check"]["steps"], 6);
    assert_eq!(v["check"]["has_eval"], true);

    let path = s.join("step_002.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert_eq!(code(&cfsseg(&["export-check", p(&s)])), 3);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, bad).unwrap();
    assert_eq!(code(&cfsseg(&["export-check", p(&s)])), 3);

    // without a manifest there is nothing to check against
    assert_eq!(code(&cfsseg(&["export-check", p(&tmp.path().join("missing"))])), 2);
}

#[test]
fn bench_reports_timings_for_each_size() {
    let tmp = TempDir::new().unwrap();
    let out_path = tmp.path().join("bench.json");
    ok(&["bench", "--sizes", "128,256", "--n-rows", "16", "--out", p(&out_path)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&out_path).unwrap()).unwrap();
    let timings = v["timings"].as_array().unwrap();
    assert_eq!(timings.len(), 2);
    assert_eq!(timings[0]["d_expanded"], 128);
    for t in timings {
        assert!(t["direct_s"].as_f64().unwrap() > 0.0);
        assert!(t["woodbury_s"].as_f64().unwrap() > 0.0);
    }
    assert_eq!(v["woodbury_beats_direct"], true);
    assert_eq!(code(&cfsseg(&["bench", "--sizes", ""])), 2);
}
