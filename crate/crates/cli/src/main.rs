use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use gstyle_core::pipeline::{configure_threads, render_views, run_full, stats, PipelineConfig};
use gstyle_core::preprocess::preprocess_pipeline;
use gstyle_core::profile::Profile;
use gstyle_core::scene::ColorSource;
use gstyle_core::scene_io::{load_views, read_ply, write_ply};
use gstyle_core::synthetic::{synthetic_case, write_case, SyntheticSpec};

/// Stylize Gaussian-splat scenes to match a style image.
#[derive(Debug, Parser)]
#[command(name = "gstyle", version)]
struct Cli {
    /// TOML config; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split flat Gaussians, narrow elongated ones and refit against the views.
    Preprocess(PreprocessArgs),
    /// Optimize style colors with periodic split and refit.
    Stylize(StylizeArgs),
    /// Full pipeline into an output directory.
    Run(RunArgs),
    /// Render every dataset view of a scene to PNG.
    Render(RenderArgs),
    /// Size accounting and shape distributions of a PLY scene.
    Stats(StatsArgs),
    /// Write a seeded synthetic scene and dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Gt,
    Style,
}

impl From<SourceArg> for ColorSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Gt => ColorSource::Gt,
            SourceArg::Style => ColorSource::Style,
        }
    }
}

#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// `forward` or `360`.
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    lambda_clip: Option<f64>,
    #[arg(long)]
    lambda_nnfm: Option<f64>,
    #[arg(long)]
    lambda_content: Option<f64>,
    #[arg(long)]
    lambda_tv: Option<f64>,
    /// Fraction of Gaussians split at each split event.
    #[arg(long)]
    split_percent: Option<f64>,
    #[arg(long)]
    refit_steps: Option<usize>,
    /// Render background as `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_rgb)]
    background: Option<[f64; 3]>,
    #[arg(long)]
    no_color_match: bool,
    #[arg(long)]
    deterministic_split: bool,
    /// Apply the final color correction to renders only.
    #[arg(long)]
    no_bake: bool,
}

fn parse_rgb(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected r,g,b, got {} values", v.len()))
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.profile {
            cfg.stylize.profile = p;
        }
        if let Some(e) = self.epochs {
            cfg.stylize.epochs = e;
        }
        if self.lr_start.is_some() {
            cfg.stylize.lr_start = self.lr_start;
        }
        if self.lr_end.is_some() {
            cfg.stylize.lr_end = self.lr_end;
        }
        let w = &mut cfg.weights;
        w.lambda_clip = self.lambda_clip.or(w.lambda_clip);
        w.lambda_nnfm = self.lambda_nnfm.or(w.lambda_nnfm);
        w.lambda_content = self.lambda_content.or(w.lambda_content);
        w.lambda_tv = self.lambda_tv.or(w.lambda_tv);
        if let Some(p) = self.split_percent {
            cfg.stylize.split_percent = p;
        }
        if let Some(r) = self.refit_steps {
            cfg.stylize.refit_steps = r;
        }
        if self.background.is_some() {
            cfg.background = self.background;
        }
        cfg.flags.no_color_match |= self.no_color_match;
        cfg.flags.deterministic_split |= self.deterministic_split;
        if self.no_bake {
            cfg.flags.bake_final_color = false;
        }
    }
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    rounds: Option<usize>,
    /// Initial flatness multiplier.
    #[arg(long)]
    gamma: Option<f64>,
    /// Elongation threshold.
    #[arg(long)]
    te: Option<f64>,
    #[arg(long)]
    refit_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic_split: bool,
}

#[derive(Debug, Args)]
struct StylizeArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    style: Option<PathBuf>,
    /// Stylized PLY; renders and the report go next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    style: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    skip_preprocess: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "style")]
    source: SourceArg,
    /// Appended to each dataset image stem.
    #[arg(long, default_value = "_render")]
    suffix: String,
}

#[derive(Debug, Args)]
struct StatsArgs {
    scene: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    gaussians: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Image width and height.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Jitter applied to the input scene relative to the ground truth.
    #[arg(long, default_value_t = 1.0)]
    perturb: f64,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn preprocess(cfg: PipelineConfig, a: PreprocessArgs) -> Result<()> {
    let mut cfg = cfg;
    if let Some(p) = a.input {
        cfg.paths.scene = p;
    }
    if let Some(d) = a.dataset {
        cfg.paths.dataset = d;
    }
    let pc = &mut cfg.preprocess;
    pc.rounds = a.rounds.unwrap_or(pc.rounds);
    pc.gamma_init = a.gamma.unwrap_or(pc.gamma_init);
    pc.elongation_threshold = a.te.unwrap_or(pc.elongation_threshold);
    pc.refit_steps_per_round = a.refit_steps.unwrap_or(pc.refit_steps_per_round);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.flags.deterministic_split |= a.deterministic_split;
    if cfg.paths.scene.as_os_str().is_empty() || cfg.paths.dataset.as_os_str().is_empty() {
        bail!("preprocess needs --input and --dataset (or paths in --config)");
    }
    cfg.preprocess.validate()?;

    let scene = read_ply(&cfg.paths.scene)?;
    let views = load_views(&cfg.paths.dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (out, report) = preprocess_pipeline(&scene, &views, &cfg.preprocess, cfg.split_mode(), &mut rng)?;
    write_ply(&out, ColorSource::Gt, &a.out)?;
    print_json(&report)
}

fn stylize(cfg: PipelineConfig, a: StylizeArgs) -> Result<()> {
    let mut cfg = cfg;
    if let Some(p) = a.scene {
        cfg.paths.scene = p;
    }
    if let Some(d) = a.dataset {
        cfg.paths.dataset = d;
    }
    if a.style.is_some() {
        cfg.paths.style = a.style;
    }
    a.overrides.apply(&mut cfg);
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.paths.output = dir.to_path_buf();
    cfg.paths.stylized_ply = Some(a.out.clone());
    if a.metrics.is_some() {
        cfg.paths.metrics = a.metrics;
    }
    cfg.flags.skip_preprocess = true;
    print_json(&run_full(&cfg)?)
}

fn run(cfg: PipelineConfig, a: RunArgs) -> Result<()> {
    let mut cfg = cfg;
    if let Some(p) = a.scene {
        cfg.paths.scene = p;
    }
    if let Some(d) = a.dataset {
        cfg.paths.dataset = d;
    }
    if a.style.is_some() {
        cfg.paths.style = a.style;
    }
    if let Some(o) = a.out {
        cfg.paths.output = o;
    }
    cfg.flags.skip_preprocess |= a.skip_preprocess;
    a.overrides.apply(&mut cfg);
    print_json(&run_full(&cfg)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Preprocess(a) => preprocess(cfg, a),
        Command::Stylize(a) => stylize(cfg, a),
        Command::Run(a) => run(cfg, a),
        Command::Render(a) => {
            let r = render_views(&a.scene, &a.dataset, &a.out, a.source.into(), &a.suffix)?;
            print_json(&r)
        }
        Command::Stats(a) => print_json(&stats(&a.scene)?),
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                num_gaussians: a.gaussians,
                num_views: a.views,
                width: a.size,
                height: a.size,
                seed: a.seed,
                ..Default::default()
            };
            let case = synthetic_case(&spec, a.perturb)?;
            let (scene, dataset) =
                write_case(&a.out, &case).with_context(|| format!("writing {}", a.out.display()))?;
            println!("{}\n{}", scene.display(), dataset.display());
            Ok(())
        }
    }
}
