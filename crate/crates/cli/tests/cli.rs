use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adsq::codes::PackedCodes;
use adsq::data::load_labels;
use adsq::metrics::{mean_ap, ApDenominator, RelevanceJudge};

fn adsq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adsq")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const CONFIG: &str = r#"{"k_half": 4, "encoder_hidden": [16], "label_hidden": [16], "semantic_dim": 8,
 "lr_min": 3e-9, "lr_max": 3e-6, "outer_rounds": 2, "t_img": 2, "t_label": 2, "batch_size": 16, "seed": 3}"#;

fn synth(dir: &Path) {
    ok(&adsq(
        &["synth", "--classes", "3", "--dim", "6", "--per-class", "20", "--queries-per-class", "5", "--seed", "7", "--out", "data"],
        dir,
    ));
    fs::write(dir.join("cfg.json"), CONFIG).unwrap();
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", "cfg.json", "--features", "data/train.feat", "--labels", "data/train.label", "--out", out];
    args.extend(extra);
    adsq(&args, dir)
}

fn manifest_outputs(path: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["outputs"].clone()
}

#[test]
fn synth_writes_files_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for f in ["train.feat", "train.label", "query.feat", "query.label", "manifest.json"] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }
    let first = manifest_outputs(&dir.path().join("data/manifest.json"));
    synth(dir.path());
    assert_eq!(first, manifest_outputs(&dir.path().join("data/manifest.json")));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["seed"], 7);
    assert!(m["version"].is_string());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = adsq(&["synth", "--classes", "3", "--dim", "4", "--per-class", "5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = adsq(&["train", "--features", "x", "--labels", "y", "--out", "m", "--variant", "half"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_encode_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    ok(&train(d, "model", &[]));
    for f in ["label.net", "imgx.net", "imgy.net", "bx.codes", "by.codes", "train_log.csv", "manifest.json"] {
        assert!(d.join("model").join(f).exists(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("model/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["gamma"], 0.01);
    assert_eq!(m["config"]["nu"], 10.0);
    assert!(m["wall_clock_s"]["label"].is_number());

    ok(&adsq(&["encode", "--model", "model", "--features", "data/query.feat", "--out", "q.codes"], d));
    ok(&adsq(&["encode", "--model", "model", "--features", "data/train.feat", "--out", "db.codes"], d));
    let q = PackedCodes::load(d.join("q.codes")).unwrap();
    assert_eq!((q.n(), q.k_total()), (15, 8));
    assert!(d.join("q.codes.manifest.json").exists());

    let out = adsq(
        &[
            "eval", "--query-codes", "q.codes", "--db-codes", "db.codes", "--query-labels", "data/query.label", "--db-labels",
            "data/train.label", "--metrics", "map,ph2,pr,pn", "--map-r", "5000",
        ],
        d,
    );
    ok(&out);
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "metric,k_total,value,grid_point");
    let map_row: Vec<&str> = csv.lines().find(|l| l.starts_with("map,")).unwrap().split(',').collect();
    assert_eq!(map_row[1], "8");
    assert_eq!(map_row[3], "5000");
    assert_eq!(csv.lines().filter(|l| l.starts_with("pr,")).count(), 10);

    let db = PackedCodes::load(d.join("db.codes")).unwrap();
    let judge = RelevanceJudge::new(
        load_labels(d.join("data/query.label")).unwrap().view(),
        load_labels(d.join("data/train.label")).unwrap().view(),
    )
    .unwrap();
    let lib = mean_ap(&q, &db, &judge, 5000, ApDenominator::MinCutoffTotal).unwrap();
    assert_eq!(map_row[2].parse::<f64>().unwrap(), lib);
}

#[test]
fn train_is_deterministic_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    ok(&train(d, "a", &[]));
    ok(&train(d, "b", &[]));
    assert_eq!(manifest_outputs(&d.join("a/manifest.json")), manifest_outputs(&d.join("b/manifest.json")));
    ok(&train(d, "c", &["--seed", "4"]));
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("c/manifest.json")).unwrap()).unwrap();
    assert_eq!(c["config"]["seed"], 4);
    assert_ne!(fs::read(d.join("a/imgx.net")).unwrap(), fs::read(d.join("c/imgx.net")).unwrap());
}

#[test]
fn symmetric_variant_writes_identical_nets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    ok(&train(d, "sym", &["--variant", "sym"]));
    assert_eq!(fs::read(d.join("sym/imgx.net")).unwrap(), fs::read(d.join("sym/imgy.net")).unwrap());
}

#[test]
fn config_errors_name_the_key_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    fs::write(d.join("cfg.json"), r#"{"alpha": 1.0, "bogus_key": 2}"#).unwrap();
    let out = train(d, "m", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    ok(&train(d, "model", &[]));
    fs::write(d.join("cfg.json"), r#"{"k_half": 3, "encoder_hidden": [16], "label_hidden": [16], "semantic_dim": 8, "outer_rounds": 0, "t_label": 1}"#)
        .unwrap();
    ok(&train(d, "model3", &[]));
    ok(&adsq(&["encode", "--model", "model", "--features", "data/query.feat", "--out", "q8.codes"], d));
    ok(&adsq(&["encode", "--model", "model3", "--features", "data/train.feat", "--out", "db6.codes"], d));
    let out = adsq(
        &["eval", "--query-codes", "q8.codes", "--db-codes", "db6.codes", "--query-labels", "data/query.label", "--db-labels", "data/train.label"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bits"));

    // feature width does not match the model
    ok(&adsq(&["synth", "--classes", "2", "--dim", "3", "--per-class", "4", "--out", "other"], d));
    let out = adsq(&["encode", "--model", "model", "--features", "other/train.feat", "--out", "x.codes"], d);
    assert_eq!(out.status.code(), Some(1));

    let out = adsq(&["encode", "--model", "missing", "--features", "data/train.feat", "--out", "x.codes"], d);
    assert_eq!(out.status.code(), Some(1));
}
