use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
phantom_dims = [40, 40, 40]
phantom_spacing_mm = 5.0

[plan]
pixel_spacing_mm = 3.0
heart_extent_mm = 190.0

[registration]
lambda = 1.0
max_steps = 15
affine_steps = 15

[cohort]
eval_dims = [24, 24, 24]
eval_spacing_mm = 8.0
source_dims = [64, 64, 64]
source_spacing_mm = 3.0

[cohort.plan]
pixel_spacing_mm = 3.0
heart_extent_mm = 190.0

[experiment.sparse]
lambda = 1.0
max_steps = 10
affine_steps = 10

[experiment.dense]
lambda = 1.0
max_steps = 10
affine_steps = 10
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cardiorecon")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(&["config"]);
    assert!(printed.contains("lambda = 2000.0"));
    let p = dir.path().join("echo.toml");
    fs::write(&p, &printed).unwrap();
    assert_eq!(ok(&["--config", s(&p), "config"]), printed);

    let cfg = small_config(dir.path());
    let small = ok(&["--config", s(&cfg), "config"]);
    assert!(small.contains("phantom_dims = [40, 40, 40]"));
    // Keys that were not given keep their defaults.
    assert!(small.contains("window_px = 10"));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = run(&["metrics", "--pred", "/nonexistent.nii", "--gt", "/nonexistent.nii", "--out", "/tmp/x.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = run(&["phantom", "--out", "/tmp/p", "--defect", "handle:XX"]);
    assert!(!out.status.success());
}

#[test]
fn phantom_slice_corrupt_ssa_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let c = s(&cfg);
    let ph = d.join("ph");
    ok(&["--config", c, "phantom", "--out", s(&ph)]);
    for f in ["phantom.nii", "phantom.nii.json", "landmarks.json", "spec.json"] {
        assert!(ph.join(f).exists(), "{f}");
    }
    let provenance: serde_json::Value = serde_json::from_str(&fs::read_to_string(ph.join("phantom.nii.json")).unwrap()).unwrap();
    assert_eq!(provenance["stage"], "phantom");

    let report = d.join("topo.json");
    let text = ok(&["mesh-check", s(&ph.join("phantom.nii")), "--report", s(&report), "--meshes", s(&d.join("meshes"))]);
    assert_eq!(text.matches("pass").count(), 5, "{text}");
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r["euler"] == 2));
    assert!(d.join("meshes/LV.stl").exists());

    let metrics = d.join("m.json");
    ok(&["metrics", "--pred", s(&ph.join("phantom.nii")), "--gt", s(&ph.join("phantom.nii")), "--out", s(&metrics)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(m["dice"].as_array().unwrap().iter().all(|x| x == 1.0));
    assert!(m["hausdorff_mm"].as_array().unwrap().iter().all(|x| x == 0.0));

    let stack = d.join("stack");
    ok(&["--config", c, "slice", "--volume", s(&ph.join("phantom.nii")), "--landmarks", s(&ph.join("landmarks.json")), "--out", s(&stack)]);
    let sidecar = stack.join("stack.json");
    let bad = d.join("bad");
    ok(&["--config", c, "corrupt", "--stack", s(&sidecar), "--seed", "9", "--out", s(&bad)]);
    let bad_sidecar = bad.join("stack.json");
    let fixed = d.join("fixed");
    let text = ok(&["--config", c, "ssa", "--stack", s(&bad_sidecar), "--out", s(&fixed), "--max-iters", "3"]);
    assert!(text.contains("iterations"));
    let state: serde_json::Value = serde_json::from_str(&fs::read_to_string(fixed.join("ssa_state.json")).unwrap()).unwrap();
    assert!(state["iterations"].as_u64().unwrap() <= 3);
    let ssd: Vec<f64> = state["total_ssd"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(ssd.windows(2).all(|w| w[1] <= w[0]), "{ssd:?}");
}

#[test]
fn register_writes_fields_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let c = s(&cfg);
    ok(&["--config", c, "phantom", "--seed", "0", "--out", s(&d.join("atlas"))]);
    ok(&["--config", c, "phantom", "--seed", "5", "--out", s(&d.join("target"))]);
    let out = d.join("reg");
    let text = ok(&[
        "--config",
        c,
        "register",
        "--target",
        s(&d.join("target/phantom.nii")),
        "--atlas",
        s(&d.join("atlas/phantom.nii")),
        "--mode",
        "dense",
        "--out",
        s(&out),
    ]);
    assert!(text.starts_with("final L_a2s"));
    for f in ["phi.nii", "phi_inv.nii", "velocity.nii", "densified.nii", "loss_trace.csv", "affine.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(out.join("loss_trace.csv")).unwrap();
    let totals: Vec<f64> = trace.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(totals.len() >= 2);
    assert!(totals.windows(2).all(|w| w[1] < w[0]));

    let out = run(&["register", "--target", s(&d.join("target/phantom.nii")), "--atlas", s(&d.join("atlas/phantom.nii")), "--mode", "sparse", "--out", s(&d.join("r2"))]);
    assert!(!out.status.success(), "sparse mode without a mask must fail");
}

#[test]
fn cohort_experiment_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let c = s(&cfg);
    let cohort = d.join("cohort");
    ok(&["--config", c, "cohort", "--n", "2", "--seed", "7", "--out", s(&cohort)]);
    assert!(cohort.join("manifest.json").exists());

    let csv = d.join("out/sreg.csv");
    let text = ok(&["--config", c, "experiment", "--combo", "ssa-sreg", "--cohort", s(&cohort), "--out", s(&csv), "--artifacts", s(&d.join("art"))]);
    assert_eq!(text.lines().count(), 5);
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().next().unwrap(), "case,label,dice,hd_mm");
    assert_eq!(rows.lines().count(), 1 + 2 * 5);
    assert!(d.join("out/sreg.summary.csv").exists());
    let case_art = d.join("art/case_001/SSA-SREG");
    for f in ["report.json", "sparse.nii", "mask.nii", "prediction.nii", "sparse_trace.csv", "ssa_state.json", "ssa_stack/stack.json"] {
        assert!(case_art.join(f).exists(), "{f}");
    }

    let table = d.join("abl.csv");
    let text = ok(&["--config", c, "ablation", "--cohort", s(&cohort), "--views", "2/3/4", "--views", "4", "--out", s(&table)]);
    assert!(text.contains("SAX&2/3/4") && text.contains("SAX&4"), "{text}");
    let body = fs::read_to_string(&table).unwrap();
    assert_eq!(body.lines().count(), 3);
}
