use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::color_match::{apply_to_image, apply_to_scene, collect_pixels, fit_color_transform, ColorTransform};
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::fine_tune::{geometry_refit, IterationMetrics, Stylizer};
use crate::image::{psnr, ImageBuffer};
use crate::losses::{total_loss, StyleTargets, ViewInput};
use crate::preprocess::{preprocess_pipeline, PreprocessReport};
use crate::render::render;
use crate::scene::{ColorSource, GaussianScene};
use crate::scene_io::{load_png, load_views, read_ply, save_png, write_ply, View};

pub const LOCK_FILE: &str = ".gstyle.lock";
pub const PREPROCESSED_PLY: &str = "scene_preprocessed.ply";
pub const STYLIZED_PLY: &str = "scene_stylized.ply";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RENDERS_DIR: &str = "renders";
pub const RENDER_SUFFIX: &str = "_stylized";
/// Mixed into the run seed for the style-feature subsample.
const STYLE_SAMPLE_SALT: u64 = 0x0057_7e5a;

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidInput(format!(
                "output directory {} is in use by another run (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub status: StageStatus,
    pub seconds: f64,
    pub gaussians_before: usize,
    pub gaussians_after: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub clip: f64,
    pub nnfm: f64,
    pub content: f64,
    pub tv: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalColorMode {
    Baked,
    ImageOnly,
    #[default]
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ColorMatchSummary {
    pub initial: Option<ColorTransform>,
    #[serde(rename = "final")]
    pub final_transform: Option<ColorTransform>,
    pub final_mode: FinalColorMode,
}

/// Mean PSNR of `c_gt` renders against the views, before and after preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub psnr_before: Option<f64>,
    pub psnr_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Outputs {
    pub preprocessed_ply: Option<PathBuf>,
    pub stylized_ply: Option<PathBuf>,
    pub renders: Vec<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub threads: usize,
    pub stages: Vec<StageRecord>,
    pub preprocess: Option<PreprocessReport>,
    pub fidelity: Option<Fidelity>,
    pub color_match: ColorMatchSummary,
    pub final_loss: Option<LossSummary>,
    pub outputs: Outputs,
    pub partial: bool,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

impl RunReport {
    /// Stage names in execution order, with `stylize` repeated per epoch.
    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage '{stage}' failed: {source}")]
pub struct PipelineError {
    pub stage: String,
    #[source]
    pub source: Error,
}

impl PipelineError {
    pub fn new(stage: impl Into<String>, source: Error) -> Self {
        Self {
            stage: stage.into(),
            source,
        }
    }
}

/// Mean PSNR of `c_gt` renders; `None` when any view is reproduced exactly.
pub fn mean_psnr(scene: &GaussianScene, views: &[View]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    for v in views {
        sum += psnr(&render(scene, &v.camera, ColorSource::Gt).image, &v.image)?;
    }
    let m = sum / views.len() as f64;
    Ok(m.is_finite().then_some(m))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `name.png` → `name{suffix}.png`.
pub fn suffixed_name(name: &str, suffix: &str) -> String {
    let p = Path::new(name);
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| name.to_string());
    format!("{stem}{suffix}.png")
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    report: RunReport,
}

impl<'a> Run<'a> {
    fn stage<T>(
        &mut self,
        name: &str,
        epoch: Option<usize>,
        before: usize,
        f: impl FnOnce(&mut Self) -> Result<(T, usize, Option<String>)>,
    ) -> std::result::Result<T, PipelineError> {
        let t0 = Instant::now();
        match f(self) {
            Ok((value, after, note)) => {
                self.report.stages.push(StageRecord {
                    name: name.into(),
                    epoch,
                    status: StageStatus::Completed,
                    seconds: t0.elapsed().as_secs_f64(),
                    gaussians_before: before,
                    gaussians_after: after,
                    note,
                });
                Ok(value)
            }
            Err(e) => {
                self.report.stages.push(StageRecord {
                    name: name.into(),
                    epoch,
                    status: StageStatus::Failed,
                    seconds: t0.elapsed().as_secs_f64(),
                    gaussians_before: before,
                    gaussians_after: before,
                    note: Some(e.to_string()),
                });
                Err(PipelineError::new(name, e))
            }
        }
    }

    fn skip(&mut self, name: &str, count: usize, note: &str) {
        self.report.stages.push(StageRecord {
            name: name.into(),
            epoch: None,
            status: StageStatus::Skipped,
            seconds: 0.0,
            gaussians_before: count,
            gaussians_after: count,
            note: Some(note.into()),
        });
    }

    fn execute(&mut self) -> std::result::Result<(), PipelineError> {
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let (mut scene, mut views, style) = self.stage("load", None, 0, |_| {
            let mut scene = read_ply(&cfg.paths.scene)?;
            if let Some(bg) = cfg.background {
                scene.background = nalgebra::Vector3::from(bg);
            }
            scene.validate()?;
            let views = load_views(&cfg.paths.dataset)?;
            let style_path = cfg.style_path();
            if !style_path.is_file() {
                return Err(Error::Dataset(format!("missing style image {}", style_path.display())));
            }
            let style = load_png(&style_path)?;
            let n = scene.len();
            Ok(((scene, views, style), n, None))
        })?;

        if cfg.flags.skip_preprocess {
            self.skip("preprocess", scene.len(), "disabled by flag");
        } else {
            let before = scene.len();
            scene = self.stage("preprocess", None, before, |run| {
                let psnr_before = mean_psnr(&scene, &views)?;
                let (pre, rep) = preprocess_pipeline(&scene, &views, &cfg.preprocess, cfg.split_mode(), &mut rng)?;
                let psnr_after = mean_psnr(&pre, &views)?;
                let path = run.out.join(PREPROCESSED_PLY);
                write_ply(&pre, ColorSource::Gt, &path)?;
                let splits: usize = rep.rounds.iter().map(|r| r.split.len()).sum();
                let note = format!("{splits} flat splits, max elongation {:.4}", rep.max_elongation);
                run.report.preprocess = Some(rep);
                run.report.fidelity = Some(Fidelity { psnr_before, psnr_after });
                run.report.outputs.preprocessed_ply = Some(path);
                let n = pre.len();
                Ok((pre, n, Some(note)))
            })?;
        }

        if cfg.flags.no_color_match {
            self.skip("color_match_init", scene.len(), "color matching disabled");
        } else {
            let before = scene.len();
            let (s, v) = self.stage("color_match_init", None, before, |run| {
                let t = fit_color_transform(&collect_pixels(views.iter().map(|v| &v.image)), &collect_pixels([&style]))?;
                let views: Vec<View> = views
                    .iter()
                    .map(|v| View {
                        image: apply_to_image(&t, &v.image),
                        ..v.clone()
                    })
                    .collect();
                let mut s = apply_to_scene(&t, &scene, ColorSource::Gt);
                let refit = geometry_refit(&mut s, &views, &crate::fine_tune::RefitConfig {
                    steps: cfg.color_match.refit_steps,
                    ..cfg.stylize.refit.clone()
                })?;
                run.report.color_match.initial = Some(t);
                let note = format!("refit loss {:.6} → {:.6}", refit.initial_loss, refit.final_loss);
                let n = s.len();
                Ok(((s, views), n, Some(note)))
            })?;
            scene = s;
            views = v;
        }
        for g in &mut scene.gaussians {
            g.color_style = g.color_gt;
        }

        let encoder = Encoder::new(&cfg.encoder).map_err(|e| PipelineError::new("stylize", e))?;
        let max_cells = (cfg.stylize.max_style_cells > 0).then_some(cfg.stylize.max_style_cells);
        let targets = StyleTargets::from_image(&encoder, &style, max_cells, cfg.seed ^ STYLE_SAMPLE_SALT)
            .map_err(|e| PipelineError::new("stylize", e))?;
        let mut stylizer = Stylizer::new(
            cfg.stylize.clone(),
            cfg.loss_weights(),
            encoder,
            targets,
            &views,
            &scene,
            cfg.split_mode(),
        )
        .map_err(|e| PipelineError::new("stylize", e))?;

        let metrics_path = cfg.metrics_path();
        if let Some(parent) = metrics_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::new("stylize", Error::io(parent, e)))?;
        }
        let file = File::create(&metrics_path).map_err(|e| PipelineError::new("stylize", Error::io(&metrics_path, e)))?;
        let mut metrics = BufWriter::new(file);
        self.report.outputs.metrics = Some(metrics_path.clone());
        let mut prev_mean: Option<f64> = None;
        for epoch in 1..=cfg.stylize.epochs {
            let before = scene.len();
            let summary = self.stage("stylize", Some(epoch), before, |_| {
                let mut sink = |m: &IterationMetrics| -> Result<()> {
                    let line = serde_json::to_string(m).map_err(|e| Error::InvalidInput(e.to_string()))?;
                    writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))
                };
                let s = stylizer.run_epoch(epoch, &mut scene, &views, &mut rng, &mut sink)?;
                let split: usize = s.splits.iter().map(|e| e.parents.len()).sum();
                let note = format!("mean loss {:.6}, {split} splits", s.mean_total);
                let n = scene.len();
                Ok((s, n, Some(note)))
            })?;
            let tol = cfg.stylize.early_stop_tolerance;
            if let Some(prev) = prev_mean {
                if tol > 0.0 && (prev - summary.mean_total) < tol * prev.abs() {
                    if let Some(last) = self.report.stages.last_mut() {
                        last.note = Some(format!("{}; early stop", last.note.clone().unwrap_or_default()));
                    }
                    break;
                }
            }
            prev_mean = Some(summary.mean_total);
        }
        metrics.flush().map_err(|e| PipelineError::new("stylize", Error::io(&metrics_path, e)))?;
        drop(metrics);

        let mut image_transform: Option<ColorTransform> = None;
        if cfg.flags.no_color_match {
            self.skip("color_match_final", scene.len(), "color matching disabled");
        } else {
            let before = scene.len();
            scene = self.stage("color_match_final", None, before, |run| {
                let renders: Vec<ImageBuffer> =
                    views.iter().map(|v| render(&scene, &v.camera, ColorSource::Style).image).collect();
                let t = fit_color_transform(&collect_pixels(&renders), &collect_pixels([&style]))?;
                run.report.color_match.final_transform = Some(t);
                let out = if cfg.flags.bake_final_color {
                    run.report.color_match.final_mode = FinalColorMode::Baked;
                    apply_to_scene(&t, &scene, ColorSource::Style)
                } else {
                    run.report.color_match.final_mode = FinalColorMode::ImageOnly;
                    image_transform = Some(t);
                    scene.clone()
                };
                let n = out.len();
                let note = if cfg.flags.bake_final_color { "baked into style colors" } else { "applied to renders only" };
                Ok((out, n, Some(note.to_string())))
            })?;
        }

        let before = scene.len();
        self.stage("export", None, before, |run| {
            let ply = cfg.stylized_ply_path();
            write_ply(&scene, ColorSource::Style, &ply)?;
            run.report.outputs.stylized_ply = Some(ply);
            let dir = run.out.join(RENDERS_DIR);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut renders = Vec::with_capacity(views.len());
            for v in &views {
                let img = render(&scene, &v.camera, ColorSource::Style).image;
                renders.push(img.clone());
                let img = match &image_transform {
                    Some(t) => apply_to_image(t, &img),
                    None => img,
                };
                let path = dir.join(suffixed_name(&v.name, RENDER_SUFFIX));
                save_png(&img, &path)?;
                run.report.outputs.renders.push(path);
            }
            let inputs: Vec<ViewInput> = renders
                .iter()
                .zip(&stylizer.gt_features)
                .map(|(r, f)| ViewInput { render: r, gt_features: f })
                .collect();
            let b = total_loss(&stylizer.encoder, &inputs, &stylizer.style, &stylizer.weights)?;
            run.report.final_loss = Some(LossSummary {
                clip: b.clip,
                nnfm: b.nnfm,
                content: b.content,
                tv: b.tv,
                total: b.total,
            });
            Ok(((), scene.len(), None))
        })?;
        Ok(())
    }
}

/// The full pipeline: load, preprocess, initial color match, stylization
/// epochs, final color match, export. A report is written even on failure.
pub fn run_full(cfg: &PipelineConfig) -> std::result::Result<RunReport, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::new("config", e))?;
    let out = cfg.paths.output.clone();
    let _lock = OutputLock::acquire(&out).map_err(|e| PipelineError::new("lock", e))?;
    let mut run = Run {
        cfg,
        report: RunReport {
            seed: cfg.seed,
            threads: rayon::current_num_threads(),
            stages: Vec::new(),
            preprocess: None,
            fidelity: None,
            color_match: ColorMatchSummary::default(),
            final_loss: None,
            outputs: Outputs {
                report: out.join(REPORT_FILE),
                ..Outputs::default()
            },
            partial: false,
            failed_stage: None,
            error: None,
        },
        out,
    };
    let result = run.execute();
    if let Err(e) = &result {
        run.report.partial = true;
        run.report.failed_stage = Some(e.stage.clone());
        run.report.error = Some(e.source.to_string());
    }
    let written = write_json(&run.report.outputs.report, &run.report);
    result?;
    written.map_err(|e| PipelineError::new("export", e))?;
    Ok(run.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedView {
    pub name: String,
    pub path: PathBuf,
    pub psnr: Option<f64>,
}

/// Renders every view of a dataset to `out_dir/<name><suffix>.png` and writes
/// `psnr.json` next to them.
pub fn render_views(
    scene_path: impl AsRef<Path>,
    dataset_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    source: ColorSource,
    suffix: &str,
) -> Result<Vec<RenderedView>> {
    let scene = read_ply(scene_path)?;
    let views = load_views(dataset_dir)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rendered = Vec::with_capacity(views.len());
    for v in &views {
        let img = render(&scene, &v.camera, source).image;
        let path = out_dir.join(suffixed_name(&v.name, suffix));
        save_png(&img, &path)?;
        let p = psnr(&img, &v.image)?;
        rendered.push(RenderedView {
            name: v.name.clone(),
            path,
            psnr: p.is_finite().then_some(p),
        });
    }
    write_json(&out_dir.join("psnr.json"), &rendered)?;
    Ok(rendered)
}
