use std::path::{Path, PathBuf};
use std::process::Command;

use blockprune::executor::{ExecutionPlan, PlanOptions};
use blockprune::io::ModelArchive;
use blockprune::tensor::max_rel_err;
use blockprune::LayerKind;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/converter").join(name)
}

/// Largest relative deviation of the primary executor from the converter's
/// numpy reference outputs. Values are compared against the output scale so
/// near-zero logits do not dominate.
fn reference_error(archive: &ModelArchive) -> f64 {
    let r = archive.reference.as_ref().expect("archive carries reference data");
    let plan = ExecutionPlan::compile(&archive.graph, &archive.masks, &PlanOptions::default()).unwrap();
    let y = plan.run(&r.input).unwrap();
    assert_eq!(y.shape(), r.output.shape());
    let scale = r.output.data().iter().fold(0f64, |m, v| m.max(v.abs() as f64));
    max_rel_err(y.data(), r.output.data(), 1e-3 * scale)
}

#[test]
fn converted_lenet5_matches_reference_outputs() {
    let a = ModelArchive::load(&fixture("lenet5-archive")).unwrap();
    assert_eq!(a.reference.as_ref().unwrap().input.shape(), &[16, 1, 28, 28]);
    let err = reference_error(&a);
    assert!(err < 1e-4, "max relative error {err}");
    let r = a.reference.as_ref().unwrap();
    let graph_out = a.graph.forward(&r.input).unwrap();
    let scale = r.output.data().iter().fold(0f64, |m, v| m.max(v.abs() as f64));
    let dense_err = max_rel_err(graph_out.data(), r.output.data(), 1e-3 * scale);
    assert!(dense_err < 1e-4, "graph forward error {dense_err}");
}

#[test]
fn converted_mlp2_has_two_fc_layers() {
    let a = ModelArchive::load(&fixture("mlp2-archive")).unwrap();
    let fcs = a.graph.layers().iter().filter(|l| matches!(l.kind, LayerKind::Fc { .. })).count();
    assert_eq!(fcs, 2);
    assert!(reference_error(&a) < 1e-4);
}

#[test]
fn converted_residual_depthwise_net_matches() {
    let a = ModelArchive::load(&fixture("residual-archive")).unwrap();
    assert!(a.graph.layers().iter().any(|l| matches!(l.kind, LayerKind::DepthwiseConv2d { .. })));
    assert!(reference_error(&a) < 1e-4);
}

#[test]
fn converter_rejects_unsupported_ops_when_available() {
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/convert.py");
    let out_dir = tempfile::tempdir().unwrap();
    let run = Command::new("python3")
        .arg(&script)
        .arg(fixture("batchnorm-checkpoint/checkpoint.json"))
        .arg("--out")
        .arg(out_dir.path())
        .output();
    let Ok(out) = run else {
        eprintln!("python3 not available; skipping");
        return;
    };
    let stderr = String::from_utf8_lossy(&out.stderr);
    if stderr.contains("No module named") {
        eprintln!("numpy not available; skipping");
        return;
    }
    assert!(!out.status.success());
    assert!(stderr.contains("BatchNormalization"), "{stderr}");
    assert!(!out_dir.path().join("manifest.json").exists());
}
