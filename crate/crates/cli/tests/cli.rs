use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gstyle_core::pipeline::{RenderedView, RunReport, StageStatus};
use gstyle_core::preprocess::PreprocessReport;
use gstyle_core::scene_io::read_ply;

fn gstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gstyle")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, gaussians: usize, views: usize, size: usize) -> (PathBuf, PathBuf) {
    let out = dir.join("case");
    let o = gstyle(&[
        "synth",
        "--out",
        s(&out),
        "--gaussians",
        &gaussians.to_string(),
        "--views",
        &views.to_string(),
        "--size",
        &size.to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (out.join("scene.ply"), out.join("dataset"))
}

#[test]
fn empty_scene_file_fails_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.ply");
    std::fs::write(&p, b"").unwrap();
    let o = gstyle(&["stats", s(&p)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("empty.ply"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[stylize]\nepoch = 2\n").unwrap();
    let o = gstyle(&["--config", s(&cfg), "stats", "x.ply"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn render_writes_one_png_per_camera_with_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dataset) = synth(dir.path(), 30, 3, 24);
    let truth = dir.path().join("case/truth.ply");
    let out = dir.path().join("renders");
    let o = gstyle(&["render", "--scene", s(&truth), "--dataset", s(&dataset), "--out", s(&out), "--source", "gt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Vec<RenderedView> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r.len(), 3);
    for v in &r {
        assert!(v.path.is_file());
        assert!(v.path.file_name().unwrap().to_str().unwrap().ends_with("_render.png"));
        assert!(v.psnr.is_none_or(|p| p > 50.0), "{v:?}");
    }
    assert!(out.join("psnr.json").is_file());
}

#[test]
fn preprocess_then_stylize() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, dataset) = synth(dir.path(), 40, 2, 32);
    let pre = dir.path().join("pre.ply");
    let o = gstyle(&[
        "preprocess",
        "--input",
        s(&scene),
        "--dataset",
        s(&dataset),
        "--out",
        s(&pre),
        "--rounds",
        "2",
        "--refit-steps",
        "10",
        "--te",
        "1.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: PreprocessReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep.rounds.len(), 2);
    assert!(rep.max_elongation <= 1.5);
    assert_eq!(read_ply(&pre).unwrap().len(), rep.rounds[1].gaussians);

    let styled = dir.path().join("styled/scene_styled.ply");
    let metrics = dir.path().join("m.jsonl");
    let o = gstyle(&[
        "stylize",
        "--scene",
        s(&pre),
        "--dataset",
        s(&dataset),
        "--out",
        s(&styled),
        "--metrics",
        s(&metrics),
        "--profile",
        "360",
        "--epochs",
        "2",
        "--refit-steps",
        "5",
        "--no-color-match",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: RunReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r.stages[1].status, StageStatus::Skipped);
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 4);
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&metrics).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["lr"].as_f64(), Some(1e-2));
    assert_eq!(read_ply(&styled).unwrap().len(), r.stages.last().unwrap().gaussians_after);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, dataset) = synth(dir.path(), 30, 2, 24);
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            "seed = 3\n[paths]\nscene = {:?}\ndataset = {:?}\noutput = {:?}\n[flags]\nskip_preprocess = true\n[stylize]\nepochs = 4\nrefit_steps = 5\n[color_match]\nrefit_steps = 5\n",
            s(&scene),
            s(&dataset),
            s(&out)
        ),
    )
    .unwrap();
    let o = gstyle(&["--config", s(&cfg), "run", "--epochs", "1", "--no-bake", "--background", "0,0,0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: RunReport = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r.seed, 3);
    assert_eq!(r.stages.iter().filter(|s| s.name == "stylize").count(), 1);
    assert_eq!(r.color_match.final_mode, gstyle_core::pipeline::FinalColorMode::ImageOnly);
    let t = r.color_match.initial.unwrap();
    let bg = read_ply(out.join("scene_stylized.ply")).unwrap().background;
    let expected = t.apply(&nalgebra::Vector3::zeros()).map(|v| v.clamp(0.0, 1.0));
    assert!((bg - expected).norm() < 1e-6, "{bg:?} vs {expected:?}");
}

#[test]
fn bad_thread_count_is_an_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_gstyle"))
        .env("GSTYLE_THREADS", "zero")
        .args(["stats", "x.ply"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("GSTYLE_THREADS"));
}
