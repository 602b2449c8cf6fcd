use std::path::Path;

use gstyle_core::pipeline::{
    run_full, stats, PipelineConfig, RunReport, StageStatus, LOCK_FILE, METRICS_FILE, STYLIZED_PLY,
};
use gstyle_core::scene_io::read_ply;
use gstyle_core::synthetic::{synthetic_case, write_case, SyntheticSpec};

fn small_config(dir: &Path, seed: u64) -> PipelineConfig {
    let spec = SyntheticSpec {
        num_gaussians: 40,
        num_views: 2,
        width: 32,
        height: 32,
        seed,
        ..Default::default()
    };
    let case = synthetic_case(&spec, 1.0).unwrap();
    let (scene, dataset) = write_case(dir.join("input"), &case).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.paths.scene = scene;
    cfg.paths.dataset = dataset;
    cfg.paths.output = dir.join("out");
    cfg.preprocess.rounds = 2;
    cfg.preprocess.refit_steps_per_round = 20;
    cfg.stylize.epochs = 3;
    cfg.stylize.refit_steps = 10;
    cfg.color_match.refit_steps = 10;
    cfg.flags.deterministic_split = true;
    cfg
}

fn stage_names(r: &RunReport) -> Vec<String> {
    r.stages.iter().map(|s| s.name.clone()).collect()
}

#[test]
fn stages_run_in_order_and_counts_match_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let report = run_full(&cfg).unwrap();
    assert_eq!(
        stage_names(&report),
        ["load", "preprocess", "color_match_init", "stylize", "stylize", "stylize", "color_match_final", "export"]
    );
    assert!(report.stages.iter().all(|s| s.status == StageStatus::Completed));
    assert!(!report.partial);

    let grows = report.stages.iter().filter(|s| s.name == "preprocess" || s.name == "stylize");
    for s in grows {
        assert!(s.gaussians_after >= s.gaussians_before, "{s:?}");
    }
    let last = report.stages.last().unwrap().gaussians_after;
    let out = cfg.paths.output.join(STYLIZED_PLY);
    let scene = read_ply(&out).unwrap();
    scene.validate().unwrap();
    assert_eq!(scene.len(), last);
    let pre = read_ply(report.outputs.preprocessed_ply.as_ref().unwrap()).unwrap();
    assert_eq!(pre.len(), report.stages[1].gaussians_after);

    let lines = std::fs::read_to_string(cfg.paths.output.join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 3 * 2);
    assert_eq!(report.outputs.renders.len(), 2);
    assert!(report.outputs.renders.iter().all(|p| p.is_file()));
    assert!(!cfg.paths.output.join(LOCK_FILE).exists());
    assert_eq!(stats(&out).unwrap().color_bytes_per_gaussian, 12);

    let on_disk: RunReport =
        serde_json::from_str(&std::fs::read_to_string(&report.outputs.report).unwrap()).unwrap();
    assert_eq!(stage_names(&on_disk), stage_names(&report));
}

#[test]
fn no_color_match_skips_both_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 2);
    cfg.flags.no_color_match = true;
    cfg.flags.skip_preprocess = true;
    cfg.stylize.epochs = 1;
    let report = run_full(&cfg).unwrap();
    let skipped: Vec<_> = report
        .stages
        .iter()
        .filter(|s| s.status == StageStatus::Skipped)
        .map(|s| s.name.as_str())
        .collect();
    assert_eq!(skipped, ["preprocess", "color_match_init", "color_match_final"]);
    assert!(report.color_match.initial.is_none() && report.color_match.final_transform.is_none());
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small_config(a.path(), 5);
    let cb = small_config(b.path(), 5);
    run_full(&ca).unwrap();
    run_full(&cb).unwrap();
    for f in [STYLIZED_PLY, METRICS_FILE] {
        let x = std::fs::read(ca.paths.output.join(f)).unwrap();
        let y = std::fs::read(cb.paths.output.join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn failures_name_the_stage_and_flag_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 3);
    cfg.paths.style = Some(dir.path().join("missing.png"));
    let err = run_full(&cfg).unwrap_err();
    assert_eq!(err.stage, "load");
    assert!(err.to_string().contains("missing.png"), "{err}");
    let report: RunReport =
        serde_json::from_str(&std::fs::read_to_string(cfg.paths.output.join("report.json")).unwrap()).unwrap();
    assert!(report.partial);
    assert_eq!(report.failed_stage.as_deref(), Some("load"));
    assert_eq!(report.stages.last().unwrap().status, StageStatus::Failed);
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 4);
    std::fs::create_dir_all(&cfg.paths.output).unwrap();
    std::fs::write(cfg.paths.output.join(LOCK_FILE), "1").unwrap();
    let err = run_full(&cfg).unwrap_err();
    assert_eq!(err.stage, "lock");
    assert!(cfg.paths.output.join(LOCK_FILE).exists());
}
