use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ecs_pinn_cli::manifest::{self, RUN_MANIFEST_FILE};
use ecs_pinn_cli::pgm;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecs-pinn"))
}

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path) {
    let o = run(&["gen", "--config", s(&asset("synthetic_1d.json")), "--out", s(out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn assert_manifest_complete(dir: &Path, command: &str) {
    let m = manifest::load(&dir.join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(m.command, command);
    assert!(!m.outputs.is_empty());
    for p in &m.outputs {
        assert!(p.exists(), "{} listed but missing", p.display());
    }
    assert!(m.version.starts_with('v'));
}

#[test]
fn analyze_reproduces_reference_peclet_values() {
    let o = run(&["analyze", "--D", "1.25e-4", "--v", "5.95e-2", "--L", "0.1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Pe_rounded=47.60"), "{text}");
    assert!(text.contains("regime=Advection"));

    let o = run(&["analyze", "--D", "3.11e-4", "--v", "1.57e-2", "--L", "0.1"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Pe_rounded=5.05"), "{text}");
    assert!(text.contains("regime=Advection"));
}

#[test]
fn analyze_zero_velocity_is_diffusive() {
    let o = run(&["analyze", "--D", "1e-4", "--v", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Pe=0\n"), "{text}");
    assert!(text.contains("regime=Diffusion"));
}

#[test]
fn analyze_rejects_nonpositive_inputs() {
    assert_eq!(run(&["analyze", "--D", "0", "--v", "1"]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "--D", "-1e-4", "--v", "1"]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "--D", "1e-4", "--v", "1", "--L", "0"]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "--v", "1"]).status.code(), Some(2));
}

#[test]
fn analyze_writes_report_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("an");
    let o = run(&["analyze", "--D", "3.11e-4", "--v", "-1.57e-2", "--L", "0.1", "--out", s(&out), "--quiet"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let text = fs::read_to_string(out.join("peclet_report.txt")).unwrap();
    let report = ecs_pinn::physics::PecletReport::from_text(&text).unwrap();
    assert!((report.peclet - 5.05).abs() < 0.01);
    assert_manifest_complete(&out, "analyze");
}

#[test]
fn gen_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a);
    gen(&b);
    assert_eq!(fs::read(a.join("frames.f32")).unwrap(), fs::read(b.join("frames.f32")).unwrap());
    let series = ecs_pinn::data::load_voxel_series(&a).unwrap();
    assert_eq!(series.num_frames(), 6);
    assert_eq!(series.dims, [200, 1, 1]);
    assert!(a.join("truth.json").exists());
    assert_manifest_complete(&a, "gen");
}

#[test]
fn gen_rejects_unstable_solver_step() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    let text = fs::read_to_string(asset("synthetic_1d.json"))
        .unwrap()
        .replace("\"generator\": \"analytic\"", "\"generator\": \"fd\", \"dt_s\": 0.5");
    fs::write(&spec, text).unwrap();
    let o = run(&["gen", "--config", s(&spec), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("diffusion=") && err.contains("advection="), "{err}");
}

#[test]
fn gen_reports_io_and_spec_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let o = run(&["gen", "--config", s(&missing), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(3));
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"dims\": [10]}").unwrap();
    let o = run(&["gen", "--config", s(&bad), "--out", s(&tmp.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--config",
        s(&asset("smoke_train.json")),
        "--dataset",
        s(&tmp.path().join("missing")),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(3));

    let ds = tmp.path().join("ds");
    gen(&ds);
    let o = run(&[
        "train",
        "--config",
        s(&asset("smoke_train.json")),
        "--dataset",
        s(&ds),
        "--out",
        s(&tmp.path().join("run")),
        "--epochs",
        "50",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn smoke_train_then_export() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let run_dir = tmp.path().join("run");
    gen(&ds);
    let start = Instant::now();
    let o = run(&[
        "train",
        "--config",
        s(&asset("smoke_train.json")),
        "--dataset",
        s(&ds),
        "--out",
        s(&run_dir),
        "--quiet",
    ]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(secs < 60.0, "smoke training took {secs:.1} s");
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.contains("D = ") && summary.contains("v = "), "{summary}");
    assert_manifest_complete(&run_dir, "train");

    let csv = fs::read_to_string(run_dir.join("train_record.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);

    let out = tmp.path().join("export");
    let o = run(&["export", "--run", s(&run_dir), "--out", s(&out), "--times", "0.2,1.0", "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["loss.csv", "diffusion.csv", "velocity.csv"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert_eq!(text.lines().count(), 201, "{name}");
    }
    for k in 0..2 {
        let truth = fs::read(out.join(format!("frame{k:03}_truth.pgm"))).unwrap();
        let (w, h, px) = pgm::decode(&truth).unwrap();
        assert_eq!((w, h), (200, 1));
        assert_eq!(px.len(), 200);
        let sidecar: ecs_pinn_cli::PairSidecar =
            serde_json::from_str(&fs::read_to_string(out.join(format!("frame{k:03}.json"))).unwrap()).unwrap();
        assert!(sidecar.scale.min <= sidecar.scale.max);
        assert!(sidecar.mse.is_finite());
    }
    assert_manifest_complete(&out, "export");

    let o = run(&["export", "--run", s(&run_dir), "--out", s(&tmp.path().join("e2")), "--times", "0.3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["export", "--run", s(&tmp.path().join("none")), "--out", s(&tmp.path().join("e3"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn identical_frames_give_identical_images() {
    let frame: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
    let scale = pgm::PairScale::of(&frame, &frame);
    let a = pgm::encode(8, 8, &frame, &scale);
    let b = pgm::encode(8, 8, &frame.clone(), &scale);
    assert_eq!(a, b);
    let (_, _, px) = pgm::decode(&a).unwrap();
    assert!(px.contains(&0) && px.contains(&255));
}

#[test]
fn sidecar_scale_round_trips() {
    let truth = [0.1, 0.5, 0.9, 0.3];
    let pred = [0.2, 0.4, 1.1, -0.1];
    let scale = pgm::PairScale::of(&truth, &pred);
    assert_eq!((scale.min, scale.max), (-0.1, 1.1));
    let json = serde_json::to_string(&scale).unwrap();
    let back: pgm::PairScale = serde_json::from_str(&json).unwrap();
    assert_eq!(back, scale);
    let step = (scale.max - scale.min) / 255.0;
    for v in truth.iter().chain(&pred) {
        let r = back.dequantize(back.quantize(*v));
        assert!((r - v).abs() <= step / 2.0 + 1e-15);
    }
}
