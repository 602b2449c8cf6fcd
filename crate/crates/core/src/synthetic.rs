//! Seeded synthetic scenes and datasets for tests, benches and demos.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::render::render;
use crate::scene::{normalize_quat, ColorSource, Gaussian, GaussianScene};
use crate::scene_io::{write_dataset, write_ply, Dataset, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_gaussians: usize,
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Half-width of the cube holding the means.
    pub half_extent: f64,
    /// Smallest and largest scale component before rotation.
    pub scale_range: (f64, f64),
    /// Camera distance from the origin.
    pub camera_radius: f64,
    /// Total horizontal angle spanned by the cameras, in radians.
    pub camera_arc: f64,
    pub background: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_gaussians: 200,
            num_views: 4,
            width: 64,
            height: 64,
            seed: 0,
            half_extent: 1.0,
            scale_range: (0.06, 0.18),
            camera_radius: 4.0,
            camera_arc: 0.6,
            background: [0.05, 0.05, 0.08],
        }
    }
}

fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if let Ok(q) = normalize_quat(&q) {
            return q;
        }
    }
}

/// Smooth color field so neighboring Gaussians look alike.
fn color_at(p: &Vector3<f64>, phase: f64) -> Vector3<f64> {
    Vector3::new(
        0.5 + 0.35 * (2.1 * p.x + phase).sin(),
        0.5 + 0.35 * (1.7 * p.y - 0.5 * p.z + 2.0 * phase).sin(),
        0.5 + 0.35 * (1.3 * p.z + 0.8 * p.x + 3.0 * phase).cos(),
    )
}

pub fn synthetic_scene(spec: &SyntheticSpec, rng: &mut impl Rng) -> GaussianScene {
    let phase: f64 = rng.random::<f64>() * PI;
    let (lo, hi) = spec.scale_range;
    let gaussians = (0..spec.num_gaussians)
        .map(|_| {
            let mean = Vector3::from_fn(|_, _| (rng.random::<f64>() * 2.0 - 1.0) * spec.half_extent);
            let scales = Vector3::from_fn(|_, _| lo * (hi / lo).powf(rng.random::<f64>()));
            let opacity = 0.55 + 0.4 * rng.random::<f64>();
            Gaussian::new(mean, random_quat(rng), scales, opacity, color_at(&mean, phase))
        })
        .collect();
    let mut scene = GaussianScene::new(gaussians);
    scene.background = Vector3::from(spec.background);
    scene
}

/// Cameras on a horizontal arc around the origin, all looking at it.
pub fn synthetic_cameras(spec: &SyntheticSpec) -> Vec<Camera> {
    let n = spec.num_views.max(1);
    (0..n)
        .map(|k| {
            let t = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 - 0.5 };
            let a = t * spec.camera_arc;
            let eye = Vector3::new(a.sin(), 0.15 * t, -a.cos()) * spec.camera_radius;
            Camera::look_at(
                spec.width,
                spec.height,
                spec.width as f64,
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, -1.0, 0.0),
            )
        })
        .collect()
}

/// Diagonal two-tone stripes with a warm/cool gradient.
pub fn synthetic_style(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57_91e);
    let a = Vector3::new(0.85, 0.35 + 0.2 * rng.random::<f64>(), 0.15);
    let b = Vector3::new(0.1, 0.25, 0.6 + 0.3 * rng.random::<f64>());
    let period = 6.0 + 4.0 * rng.random::<f64>();
    let mut img = ImageBuffer::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let s = ((x + y) as f64 * 2.0 * PI / period).sin();
            let t = y as f64 / height.max(1) as f64;
            let c = if s > 0.0 { a } else { b };
            img.set_pixel(x, y, &(c * (0.8 + 0.2 * t)));
        }
    }
    img
}

/// Renders the `c_gt` colors of `scene` from every camera.
pub fn render_views(scene: &GaussianScene, cameras: &[Camera]) -> Vec<View> {
    cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| View {
            name: format!("view_{k:03}.png"),
            camera: cam.clone(),
            image: render(scene, cam, ColorSource::Gt).image,
        })
        .collect()
}

/// Jitters colors, means and scales to mimic an imperfect reconstruction.
pub fn perturb(scene: &GaussianScene, amount: f64, rng: &mut impl Rng) -> GaussianScene {
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        let n = |rng: &mut _| -> f64 { Rng::sample::<f64, _>(rng, StandardNormal) };
        g.mean += Vector3::new(n(rng), n(rng), n(rng)) * (0.1 * amount * g.scales.max());
        g.scales = g.scales.map(|s| s * (1.0 + 0.2 * amount * (rng.random::<f64>() - 0.5)));
        g.color_gt = (g.color_gt + Vector3::new(n(rng), n(rng), n(rng)) * (0.05 * amount)).map(|v| v.clamp(0.0, 1.0));
        g.color_style = g.color_gt;
    }
    out
}

/// A ground-truth scene, its dataset, and the scene handed to the pipeline.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub truth: GaussianScene,
    pub input: GaussianScene,
    pub dataset: Dataset,
}

pub fn synthetic_case(spec: &SyntheticSpec, perturbation: f64) -> Result<SyntheticCase> {
    if spec.num_gaussians == 0 || spec.num_views == 0 || spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidInput("synthetic spec needs Gaussians, views and pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = synthetic_scene(spec, &mut rng);
    let views = render_views(&truth, &synthetic_cameras(spec));
    let input = if perturbation > 0.0 {
        perturb(&truth, perturbation, &mut rng)
    } else {
        truth.clone()
    };
    let dataset = Dataset::new(views, synthetic_style(spec.width, spec.height, spec.seed))?;
    Ok(SyntheticCase { truth, input, dataset })
}

pub const SCENE_FILE: &str = "scene.ply";
pub const TRUTH_FILE: &str = "truth.ply";
pub const DATASET_DIR: &str = "dataset";

/// Writes `scene.ply`, `truth.ply` and `dataset/` under `dir`.
pub fn write_case(dir: impl AsRef<Path>, case: &SyntheticCase) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scene = dir.join(SCENE_FILE);
    write_ply(&case.input, ColorSource::Gt, &scene)?;
    write_ply(&case.truth, ColorSource::Gt, dir.join(TRUTH_FILE))?;
    let data = dir.join(DATASET_DIR);
    write_dataset(&data, &case.dataset)?;
    Ok((scene, data))
}
