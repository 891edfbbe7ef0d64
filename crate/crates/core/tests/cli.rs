use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn beamloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = beamloc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_gen_is_reproducible_and_respects_ranges() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["synth-gen", "--out", s(d), "--count", "12", "--objects", "2..3", "--size", "20..30", "--seed", "9"]);
    }
    assert_eq!(files(&a), files(&b));
    let gt = fs::read_to_string(a.join("gt.jsonl")).unwrap();
    let mut per_image = std::collections::BTreeMap::<String, usize>::new();
    for line in gt.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        *per_image.entry(v["image"].as_str().unwrap().to_string()).or_default() += 1;
    }
    assert_eq!(per_image.len(), 12);
    assert!(per_image.values().all(|&n| (2..=3).contains(&n)));
    assert!(a.join("cooccurrence.csv").exists());
}

#[test]
fn single_scene_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth-gen", "--out", s(tmp.path()), "--count", "1", "--objects", "1"]);
    assert_eq!(fs::read_dir(tmp.path().join("scenes")).unwrap().count(), 1);
    assert_eq!(fs::read_to_string(tmp.path().join("gt.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn localize_eval_and_sweep_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["synth-gen", "--out", s(&data), "--count", "6", "--seed", "4"]);
    ok(&[
        "localize", "--dataset", s(&data), "--out", s(&run), "--beam-depth", "6", "--default-theta", "10", "--heatmaps",
    ]);
    let responses = fs::read_to_string(run.join("responses.jsonl")).unwrap();
    assert_eq!(responses.lines().count(), 6 * 4);
    assert_eq!(fs::read_dir(run.join("heatmaps")).unwrap().count(), 6 * 4);

    let ev = tmp.path().join("ev");
    let out = ok(&[
        "eval", "--input", s(&run.join("detections.jsonl")), "--metric", "detection", "--dataset", s(&data), "--out", s(&ev),
    ]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("mAP"));
    let ap_csv = fs::read_to_string(ev.join("ap.csv")).unwrap();
    let eval_map: f64 = ap_csv.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();

    let sw = tmp.path().join("sw");
    ok(&[
        "sweep", "--dataset", s(&data), "--param", "theta", "--values", "10", "--beam-depth", "6", "--out", s(&sw),
    ]);
    let sweep_csv = fs::read_to_string(sw.join("sweep_theta.csv")).unwrap();
    let rows: Vec<&str> = sweep_csv.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("theta,map,detections,active_pixels"));
    let sweep_map: f64 = rows[1].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(sweep_map, eval_map);
    assert!(sw.join("best_theta.txt").exists());
}

#[test]
fn alpha_sweep_zero_matches_plain_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth-gen", "--out", s(&data), "--count", "4", "--objects", "1..2", "--size", "30..50", "--seed", "8"]);
    let sw = tmp.path().join("sw");
    ok(&[
        "sweep", "--dataset", s(&data), "--param", "alpha", "--values", "0,1", "--beam-depth", "4", "--out", s(&sw),
    ]);
    let run = tmp.path().join("run");
    ok(&["localize", "--dataset", s(&data), "--out", s(&run), "--beam-depth", "4", "--rescoring", "false"]);
    let out = ok(&["eval", "--input", s(&run.join("responses.jsonl")), "--metric", "point", "--dataset", s(&data)]);
    let table = String::from_utf8(out.stdout).unwrap();
    let plain: f64 = table.lines().last().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    let csv = fs::read_to_string(sw.join("sweep_alpha.csv")).unwrap();
    let zero: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((plain - zero).abs() < 0.005, "{plain} vs {zero}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = beamloc(&["synth-gen", "--out", s(tmp.path()), "--size", "500"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = beamloc(&["localize", "--dataset", s(&tmp.path().join("nope")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = beamloc(&["localize", "--dataset", s(tmp.path()), "--out", s(tmp.path()), "--theta", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn per_image_failures_are_reported_and_the_run_continues() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth-gen", "--out", s(tmp.path()), "--count", "3", "--seed", "1"]);
    let run = tmp.path().join("run");
    let out = beamloc(&["localize", "--dataset", s(tmp.path()), "--out", s(&run), "--classes", "7", "--beam-depth", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("errors.json")).unwrap()).unwrap();
    assert_eq!(report["failed"], 3);
    assert_eq!(report["errors"][0]["image"], "scene_00000");
}

#[test]
fn bridge_provider_end_to_end() {
    let python = Command::new("python3").arg("--version").output();
    if !python.is_ok_and(|o| o.status.success()) {
        eprintln!("python3 not available; skipping");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let worker = tmp.path().join("worker.sh");
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/echo_worker.py");
    fs::write(&worker, format!("#!/bin/sh\nexec python3 {}\n", script.display())).unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&worker, fs::Permissions::from_mode(0o755)).unwrap();
    }
    fs::write(
        tmp.path().join("images.jsonl"),
        "{\"image\":\"a.png\",\"width\":64,\"height\":48}\n{\"image\":\"missing.png\",\"width\":64,\"height\":48}\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_beamloc"))
        .args(["localize", "--provider", "bridge", "--dataset", s(tmp.path()), "--out", s(&run), "--beam-depth", "3"])
        .env("BEAMLOC_BRIDGE", &worker)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("errors.json")).unwrap()).unwrap();
    assert_eq!(report["failed"], 1);
    assert_eq!(report["errors"][0]["image"], "missing.png");
    assert!(report["errors"][0]["message"].as_str().unwrap().contains("not_found"));
    let responses = fs::read_to_string(run.join("responses.jsonl")).unwrap();
    assert_eq!(responses.lines().count(), 2);
    assert!(responses.lines().all(|l| l.contains("\"image\":\"a.png\"")));
}
