//! CPU differentiable rasterizer for Gaussian scenes.
//!
//! Splats are sorted front to back by camera depth (ties by scene index),
//! then each pixel composites every splat whose 3σ bounding box covers its
//! center. The forward pass records per-pixel contribution lists so the
//! backward pass can run without replaying the sort.

mod backward;
mod project;

pub use backward::{render_backward, render_backward_colors, GaussianGrads};
pub use project::{
    project_backward, project_gaussian, project_moments, GeometryGrad, ProjectedGaussian,
    Projection, LOW_PASS, MAX_CONDITION, NEAR_PLANE,
};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::image::ImageBuffer;
use crate::scene::{ColorSource, GaussianScene};

/// Per-splat alpha is clipped to this value.
pub const MAX_ALPHA: f64 = 0.99;
/// Contributions with alpha below this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;

const TILE: usize = 16;

/// One splat's contribution to one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Index into `RenderOutput::projected`.
    pub splat: u32,
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
    /// Unclipped Gaussian falloff `exp(-½ dᵀ Σ⁻¹ d)`.
    pub falloff: f64,
    /// Whether `opacity * falloff` hit `MAX_ALPHA`.
    pub clipped: bool,
}

impl Contribution {
    /// Compositing weight `α T`.
    #[inline]
    pub fn weight(&self) -> f64 {
        self.alpha * self.transmittance
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderDiagnostics {
    pub culled: usize,
    pub degenerate: usize,
    pub visible: usize,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    /// Final transmittance per pixel, row-major.
    pub transmittance: Vec<f64>,
    /// Visible splats in compositing order.
    pub projected: Vec<ProjectedGaussian>,
    pub offsets: Vec<usize>,
    pub contributions: Vec<Contribution>,
    pub background: Vector3<f64>,
    pub color_source: ColorSource,
    pub num_gaussians: usize,
    pub diagnostics: RenderDiagnostics,
}

impl RenderOutput {
    /// Contributions of the pixel at row-major index `p`, front to back.
    pub fn pixel_contributions(&self, p: usize) -> &[Contribution] {
        &self.contributions[self.offsets[p]..self.offsets[p + 1]]
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` whose centers fall in the 3σ box.
fn pixel_rect(p: &ProjectedGaussian, width: usize, height: usize) -> Option<[usize; 4]> {
    let lo = |c: f64| (c - p.radius - 0.5).ceil();
    let hi = |c: f64| (c + p.radius - 0.5).floor();
    let x0 = lo(p.mean2d.x).max(0.0);
    let y0 = lo(p.mean2d.y).max(0.0);
    let x1 = (hi(p.mean2d.x) + 1.0).min(width as f64);
    let y1 = (hi(p.mean2d.y) + 1.0).min(height as f64);
    if !(x0 < x1 && y0 < y1) {
        return None;
    }
    Some([x0 as usize, x1 as usize, y0 as usize, y1 as usize])
}

/// Projects and depth-sorts the scene for one camera.
pub fn project_scene(
    scene: &GaussianScene,
    cam: &Camera,
    source: ColorSource,
) -> (Vec<ProjectedGaussian>, RenderDiagnostics) {
    let results: Vec<_> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| project_gaussian(g, i, cam, *g.color(source)))
        .collect();
    let mut diag = RenderDiagnostics::default();
    let mut projected = Vec::with_capacity(results.len());
    for (status, p) in results {
        match status {
            Projection::Visible => projected.extend(p),
            Projection::Culled => diag.culled += 1,
            Projection::Degenerate => diag.degenerate += 1,
        }
    }
    projected.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.source_index.cmp(&b.source_index))
    });
    diag.visible = projected.len();
    (projected, diag)
}

pub fn render(scene: &GaussianScene, cam: &Camera, source: ColorSource) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let (projected, diagnostics) = project_scene(scene, cam, source);

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let rects: Vec<Option<[usize; 4]>> = projected.iter().map(|p| pixel_rect(p, w, h)).collect();
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, rect) in rects.iter().enumerate() {
        let Some([x0, x1, y0, y1]) = *rect else { continue };
        for ty in y0 / TILE..=(y1 - 1) / TILE {
            for tx in x0 / TILE..=(x1 - 1) / TILE {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let bg = scene.background;
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<usize>, Vec<Contribution>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut colors = Vec::with_capacity(w * 3);
            let mut trans = Vec::with_capacity(w);
            let mut counts = Vec::with_capacity(w);
            let mut contribs = Vec::new();
            let py = y as f64 + 0.5;
            for x in 0..w {
                let px = x as f64 + 0.5;
                let tile = &tiles[(y / TILE) * tiles_x + x / TILE];
                let mut t = 1.0;
                let mut c = Vector3::zeros();
                let start = contribs.len();
                for &k in tile {
                    let [x0, x1, y0, y1] = rects[k as usize].unwrap();
                    if x < x0 || x >= x1 || y < y0 || y >= y1 {
                        continue;
                    }
                    let p = &projected[k as usize];
                    let d = Vector2::new(px, py) - p.mean2d;
                    let power = -0.5 * d.dot(&(p.conic * d));
                    if power > 0.0 {
                        continue;
                    }
                    let falloff = power.exp();
                    let raw = p.opacity * falloff;
                    let alpha = raw.min(MAX_ALPHA);
                    if alpha < MIN_ALPHA {
                        continue;
                    }
                    c += p.color * (alpha * t);
                    contribs.push(Contribution {
                        splat: k,
                        alpha,
                        transmittance: t,
                        falloff,
                        clipped: raw > MAX_ALPHA,
                    });
                    t *= 1.0 - alpha;
                }
                c += bg * t;
                colors.extend_from_slice(c.as_slice());
                trans.push(t);
                counts.push(contribs.len() - start);
            }
            (colors, trans, counts, contribs)
        })
        .collect();

    let mut data = Vec::with_capacity(w * h * 3);
    let mut transmittance = Vec::with_capacity(w * h);
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut contributions = Vec::new();
    offsets.push(0);
    for (colors, trans, counts, contribs) in rows {
        data.extend(colors);
        transmittance.extend(trans);
        for n in counts {
            offsets.push(offsets.last().unwrap() + n);
        }
        contributions.extend(contribs);
    }

    RenderOutput {
        image: ImageBuffer {
            width: w,
            height: h,
            data,
        },
        transmittance,
        projected,
        offsets,
        contributions,
        background: bg,
        color_source: source,
        num_gaussians: scene.len(),
        diagnostics,
    }
}
