use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn occluder(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_occluder"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small fast dataset and run settings.
fn small_config(dir: &Path, scenes: usize) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        format!(
            "[dataset]\nscenes = {scenes}\nsplit = [0.5, 0.0, 0.5]\n\n[synth]\nimage_size = [96, 96]\nradius_range = [10.0, 18.0]\n\n\
             [train]\ncheckpoint_every = 1\n\n[train.schedule]\ntotal_iters = 2\nwarmup_iters = 1\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn synth_is_deterministic_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 10);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&occluder(&["synth", "--config", s(&cfg), "--seed", "3", "--out", s(out)], &[]));
    }
    let manifest = fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest, fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(String::from_utf8(manifest).unwrap().lines().count(), 10);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 10);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn invalid_config_fails_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[synth]\nnot_a_key = 1\n").unwrap();
    let out = dir.path().join("never");
    let res = occluder(&["synth", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("not_a_key"));
    assert!(!out.exists());

    let res = occluder(&["synth", "--device", "gpu:0", "--out", s(&out)], &[]);
    assert!(!res.status.success());
    assert!(!out.exists());
    let res = occluder(&["synth", "--preset", "nonexistent", "--out", s(&out)], &[]);
    assert!(!res.status.success());
}

#[test]
fn preset_values_reach_run_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("meta");
    // Only the metadata matters here; keep the scene count tiny.
    ok(&occluder(&["synth", "--preset", "schedule-80ep", "--out", s(&out)], &[("OCCLUDER_DATASET__SCENES", "3")]));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["momentum"], 0.9);
    assert_eq!(meta["base_lr"], 0.001);
    assert_eq!(meta["preset"], "schedule-80ep");
}

#[test]
fn train_infer_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 10);
    let data = dir.path().join("data");
    ok(&occluder(&["synth", "--config", s(&cfg), "--out", s(&data)], &[]));
    let train_manifest = data.join("train.jsonl");
    let test_manifest = data.join("test.jsonl");
    assert_eq!(fs::read_to_string(&test_manifest).unwrap().lines().count(), 5);

    let mut runs = Vec::new();
    for (name, preset) in [("relational", "desk"), ("baseline", "desk-baseline"), ("relational_seed1", "desk")] {
        let run = dir.path().join(name);
        let seed = if name.ends_with("seed1") { "1" } else { "0" };
        ok(&occluder(&["train", "--preset", preset, "--config", s(&cfg), "--seed", seed, "--manifest", s(&train_manifest), "--out", s(&run)], &[]));
        let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
        let mut lines = loss.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().flatten().all(|v| v.is_finite()));
        assert!(header.contains(&"occludee_cls"));
        assert!(run.join("model_final.json").exists() && run.join("model_iter0000001.json").exists());

        let inf = run.join("infer");
        ok(&occluder(&["infer", "--preset", preset, "--checkpoint", s(&run.join("model_final.json")), "--manifest", s(&test_manifest), "--out", s(&inf)], &[]));
        let dump = inf.join("detections.jsonl");
        ok(&occluder(&["eval", "--dump", s(&dump), "--manifest", s(&test_manifest), "--out", s(&run.join("eval"))], &[]));
        assert!(run.join("eval/pr_iou50.svg").exists());
        runs.push(run);
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(runs[1].join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["lambda1"], 1.0);

    let report = dir.path().join("report");
    let mut args = vec!["report", "--out", s(&report), "--runs"];
    args.extend(runs.iter().map(|r| s(r)));
    ok(&occluder(&args, &[]));
    let table = fs::read_to_string(report.join("comparison.csv")).unwrap();
    assert!(table.starts_with("model,step,AP,AP50,AP75,AR,AR50,AR75,F1\n"));
    assert_eq!(table.lines().count(), 4);
    assert!(report.join("loss_curves.svg").exists() && report.join("pr_curves.svg").exists());

    // Resuming a finished run is a no-op that keeps the log intact.
    ok(&occluder(&["train", "--config", s(&cfg), "--manifest", s(&train_manifest), "--out", s(&runs[0])], &[]));
    assert_eq!(fs::read_to_string(runs[0].join("loss.csv")).unwrap().lines().count(), 3);
}

#[test]
fn perfect_dump_scores_one_and_unknown_ids_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 5);
    let data = dir.path().join("data");
    ok(&occluder(&["synth", "--config", s(&cfg), "--out", s(&data)], &[]));
    let manifest = data.join("manifest.jsonl");
    let mut dump = String::new();
    for line in fs::read_to_string(&manifest).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        for b in rec["boxes"].as_array().unwrap() {
            let d = serde_json::json!({"image_id": rec["image_id"], "box": b, "score": 1.0, "label": 1, "branch": "occludee", "expansion_index": 0});
            dump.push_str(&format!("{d}\n"));
        }
    }
    let path = dir.path().join("perfect.jsonl");
    fs::write(&path, &dump).unwrap();
    ok(&occluder(&["eval", "--dump", s(&path), "--manifest", s(&manifest), "--out", s(&dir.path().join("ev"))], &[]));
    let row: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/summary.json")).unwrap()).unwrap();
    for k in ["ap", "ap50", "ap75", "ar", "ar50", "ar75", "precision", "recall", "f1"] {
        assert_eq!(row["summary"][k], 1.0, "{k}");
    }

    dump.push_str("{\"image_id\":\"ghost_image\",\"box\":[0,0,5,5],\"score\":0.9,\"label\":1,\"branch\":\"occluder\",\"expansion_index\":null}\n");
    fs::write(&path, &dump).unwrap();
    let res = occluder(&["eval", "--dump", s(&path), "--manifest", s(&manifest), "--out", s(&dir.path().join("ev2"))], &[]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("ghost_image"));
    assert!(!dir.path().join("ev2").exists());
}

#[test]
fn augment_writes_copies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 4);
    let data = dir.path().join("data");
    ok(&occluder(&["synth", "--config", s(&cfg), "--out", s(&data)], &[]));
    let out = dir.path().join("aug");
    ok(&occluder(&["augment", "--config", s(&cfg), "--manifest", s(&data.join("manifest.jsonl")), "--copies", "2", "--families", "gt_cst_mixup", "--out", s(&out)], &[]));
    assert_eq!(fs::read_to_string(out.join("manifest.jsonl")).unwrap().lines().count(), 8);
}
