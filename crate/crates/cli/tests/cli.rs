use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const GRID: &str = r#"{"layer_types":["fc"],"channels":[32,64],"features":[8,16],
"blocks":["4x4","16x32","whole"],"rates":[4.0],"pattern":false}"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockprune"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("BLOCKPRUNE_THREADS")
        .args(args)
        .output()
        .expect("spawn cli")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn table(dir: &Path) {
    std::fs::write(dir.join("grid.json"), GRID).unwrap();
    ok(dir, &["latmodel", "build", "--grid", "grid.json", "--runs", "5", "--out", "table.json"]);
}

fn pipeline(dir: &Path, tag: &str) -> (Vec<u8>, Vec<u8>) {
    let m = |s: &str| format!("{tag}-{s}");
    ok(dir, &["--seed", "3", "model", "init", "--arch", "mlp2", "--out", &m("m0")]);
    ok(
        dir,
        &["--seed", "3", "train", "--model", &m("m0"), "--data", "synthetic:300", "--epochs", "2", "--out", &m("m1")],
    );
    ok(dir, &["--seed", "3", "map", "rule", "--model", &m("m1"), "--table", "table.json", "--out", &m("map.json")]);
    ok(
        dir,
        &[
            "--seed",
            "3",
            "prune",
            "--model",
            &m("m1"),
            "--mapping",
            &m("map.json"),
            "--data",
            "synthetic:300",
            "--epochs",
            "3",
            "--finetune-epochs",
            "1",
            "--lambda",
            "0.05",
            "--out",
            &m("m2"),
        ],
    );
    ok(dir, &["--seed", "3", "pack", "--model", &m("m2"), "--out", &m("m3")]);
    ok(dir, &["report", "--model", &m("m3"), "--table", "table.json", "--out", &m("report.json")]);
    (std::fs::read(dir.join(m("map.json"))).unwrap(), std::fs::read(dir.join(m("report.json"))).unwrap())
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    table(dir.path());
    let a = pipeline(dir.path(), "a");
    let b = pipeline(dir.path(), "b");
    assert_eq!(a.0, b.0, "mapping documents differ");
    assert_eq!(a.1, b.1, "report documents differ");
    let map: Value = serde_json::from_slice(&a.0).unwrap();
    assert_eq!(map["seed"], 3);
    assert!(map["config_hash"].as_str().unwrap().len() == 64);
    let report: Value = serde_json::from_slice(&a.1).unwrap();
    assert_eq!(report["model"]["seed"], 3);
}

#[test]
fn bench_emits_one_record_per_layer_plus_total() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["model", "init", "--arch", "lenet5", "--out", "m"]);
    for fuse in [true, false] {
        let mut args = vec!["run", "--model", "m", "--bench", "--runs", "50", "--batch-size", "2"];
        if !fuse {
            args.push("--no-fuse");
        }
        let doc: Value = serde_json::from_str(&ok(d, &args)).unwrap();
        let ids: Vec<&str> = doc["bench"].as_array().unwrap().iter().map(|r| r["layer_id"].as_str().unwrap()).collect();
        assert_eq!(ids.last(), Some(&"total"));
        let layers: Vec<&str> = ids[..ids.len() - 1].iter().flat_map(|id| id.split('+')).collect();
        assert_eq!(
            layers,
            ["conv1", "relu1", "pool1", "conv2", "relu2", "pool2", "flatten", "fc1", "relu3", "fc2", "relu4", "fc3"]
        );
        if !fuse {
            assert_eq!(ids.len(), 13);
        }
        assert!(doc["bench"].as_array().unwrap().iter().all(|r| r["runs"] == 50));
    }
}

#[test]
fn report_on_unpruned_model_is_dense() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["model", "init", "--arch", "convnet-mini", "--out", "m"]);
    let text = ok(d, &["report", "--model", "m", "--out", "r.json"]);
    assert!(text.contains("conv1"));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["compression"], 1.0);
    for l in r["layers"].as_array().unwrap() {
        assert_eq!(l["scheme"], "none");
        assert_eq!(l["compression"], 1.0);
        assert_eq!(l["dense_macs"], l["sparse_macs"]);
    }
}

#[test]
fn failures_exit_nonzero_with_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = cli(d, &["report", "--model", "missing"]);
    assert!(!out.status.success());
    let err: Value =
        serde_json::from_slice(out.stderr.split(|&b| b == b'\n').find(|l| l.starts_with(b"{")).unwrap()).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_argument");
    assert!(err["error"]["message"].as_str().unwrap().contains("missing"));

    std::fs::write(d.join("bad.json"), r#"{"sede": 1}"#).unwrap();
    let out = cli(d, &["--config", "bad.json", "model", "init", "--arch", "mlp2", "--out", "m"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"seed": 11, "paths": {"output": "from-file"}}"#).unwrap();
    ok(d, &["--config", "cfg.json", "model", "init", "--arch", "mlp2"]);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(d.join("from-file/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["provenance"]["seed"], 11);
    ok(d, &["--config", "cfg.json", "--seed", "12", "model", "init", "--arch", "mlp2", "--out", "flag"]);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(d.join("flag/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["provenance"]["seed"], 12);
}

#[test]
fn threads_do_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["model", "init", "--arch", "convnet-mini", "--out", "m"]);
    std::fs::write(d.join("map.json"), {
        let g = r#"{"method":"rule","tool_version":"x","seed":0,"layers":[
            {"layer_id":"conv1","regularity":"block_punched","block_size":"4x4","rate":4.0,"rationale":""},
            {"layer_id":"fc1","regularity":"block_row_column","block_size":"4x4","rate":4.0,"rationale":""}]}"#;
        g
    })
    .unwrap();
    ok(
        d,
        &[
            "prune",
            "--method",
            "one-shot",
            "--model",
            "m",
            "--mapping",
            "map.json",
            "--data",
            "synthetic:40",
            "--finetune-epochs",
            "0",
            "--out",
            "p",
        ],
    );
    let preds = |t: &str| -> Value {
        let doc: Value = serde_json::from_str(&ok(d, &["--threads", t, "run", "--model", "p"])).unwrap();
        doc["predictions"].clone()
    };
    assert_eq!(preds("1"), preds("4"));
}
