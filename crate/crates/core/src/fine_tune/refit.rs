//! Geometry re-optimization against ground-truth views.
//!
//! Loss per view is `L1 + w·(1 − SSIM)`, where the SSIM proxy runs on
//! luminance (channel mean) over all fully contained 7×7 box windows.
//! Renders use `c_gt`; `c_s` is never touched.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::render::{render, render_backward, GaussianGrads};
use crate::scene::{normalize_quat, ColorSource, GaussianScene};
use crate::scene_io::View;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 7;
/// Opacities are held this far inside `(0, 1)` before taking the logit.
const OPACITY_FLOOR: f64 = 1e-6;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer, what: &'static str) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::mismatch(
            what,
            format!("{}x{}", b.width, b.height),
            format!("{}x{}", a.width, a.height),
        ));
    }
    Ok(())
}

/// Mean absolute error and its (sub)gradient, with `sign(0) = 0`.
pub fn l1_loss(image: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    check_dims(image, target, "l1 loss")?;
    let n = image.data.len() as f64;
    let mut grad = ImageBuffer::new(image.width, image.height);
    let mut loss = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&image.data).zip(&target.data) {
        loss += (a - b).abs();
        *g = sign(a - b) / n;
    }
    Ok((loss / n, grad))
}

fn luma(image: &ImageBuffer) -> Vec<f64> {
    image.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
}

/// Mean windowed SSIM of the luminance channels and its gradient w.r.t.
/// `image`. The window shrinks to fit images smaller than 7 pixels.
pub fn ssim_proxy(image: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    check_dims(image, target, "ssim")?;
    let (w, h) = (image.width, image.height);
    let win = SSIM_WINDOW.min(w).min(h);
    let mut grad = ImageBuffer::new(w, h);
    if win == 0 {
        return Ok((1.0, grad));
    }
    let (x, y) = (luma(image), luma(target));
    let n = (win * win) as f64;
    let (nwx, nwy) = (w - win + 1, h - win + 1);
    let windows = (nwx * nwy) as f64;
    let mut gy = vec![0.0; w * h];
    let mut total = 0.0;
    for wy in 0..nwy {
        for wx in 0..nwx {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in wy..wy + win {
                for c in wx..wx + win {
                    let (a, b) = (x[r * w + c], y[r * w + c]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cxy = sxy / n - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;

            let d_mx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            let d_vx = -s / b2;
            let d_cxy = 2.0 * a1 / (b1 * b2);
            for r in wy..wy + win {
                for c in wx..wx + win {
                    let p = r * w + c;
                    gy[p] += (d_mx + 2.0 * d_vx * (x[p] - mx) + d_cxy * (y[p] - my)) / n;
                }
            }
        }
    }
    for (px, g) in grad.data.chunks_exact_mut(3).zip(&gy) {
        px.fill(g / (3.0 * windows));
    }
    Ok((total / windows, grad))
}

/// `L1 + ssim_weight·(1 − SSIM)` for one image.
pub fn photometric_loss(image: &ImageBuffer, target: &ImageBuffer, ssim_weight: f64) -> Result<(f64, ImageBuffer)> {
    let (l1, mut grad) = l1_loss(image, target)?;
    let (ssim, g_ssim) = ssim_proxy(image, target)?;
    for (g, s) in grad.data.iter_mut().zip(&g_ssim.data) {
        *g -= ssim_weight * s;
    }
    Ok((l1 + ssim_weight * (1.0 - ssim), grad))
}

/// View-averaged photometric loss of `c_gt` renders and its gradient with
/// respect to the natural Gaussian parameters.
pub fn refit_objective(scene: &GaussianScene, views: &[View], ssim_weight: f64) -> Result<(f64, GaussianGrads)> {
    if views.is_empty() {
        return Err(Error::InvalidInput("refit needs at least one view".into()));
    }
    let k = views.len() as f64;
    let mut total = 0.0;
    let mut grads = GaussianGrads::zeros(scene.len());
    for v in views {
        let out = render(scene, &v.camera, ColorSource::Gt);
        let (loss, mut g) = photometric_loss(&out.image, &v.image, ssim_weight)?;
        g.data.iter_mut().for_each(|x| *x /= k);
        total += loss / k;
        grads.accumulate(&render_backward(scene, &v.camera, &out, &g)?);
    }
    Ok((total, grads))
}

/// Loss only, for evaluation.
pub fn refit_loss(scene: &GaussianScene, views: &[View], ssim_weight: f64) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        let out = render(scene, &v.camera, ColorSource::Gt);
        total += photometric_loss(&out.image, &v.image, ssim_weight)?.0;
    }
    Ok(total / views.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefitConfig {
    pub steps: usize,
    /// Mean learning rate as a fraction of the scene extent.
    pub lr_mean: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_logit_opacity: f64,
    pub lr_color: f64,
    pub ssim_weight: f64,
    /// Steps per divergence-check window.
    pub eval_window: usize,
    /// Consecutive window-mean increases that abort the refit.
    pub patience: usize,
    /// Relative rise in the window mean that counts as an increase.
    pub increase_tolerance: f64,
    /// Run `normalize_narrow` every this many steps (0 disables).
    pub normalize_every: usize,
    pub elongation_threshold: f64,
}

impl Default for RefitConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr_mean: 1e-3,
            lr_log_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_logit_opacity: 2.5e-2,
            lr_color: 5e-3,
            ssim_weight: 0.2,
            eval_window: 10,
            patience: 3,
            increase_tolerance: 1e-2,
            normalize_every: 0,
            elongation_threshold: 1.5,
        }
    }
}

impl RefitConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_mean, self.lr_log_scale, self.lr_rotation, self.lr_logit_opacity, self.lr_color];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("refit learning rates must be finite and non-negative".into()));
        }
        if self.eval_window == 0 || self.patience == 0 {
            return Err(Error::Config("refit eval_window and patience must be positive".into()));
        }
        if !(self.ssim_weight >= 0.0) || !(self.elongation_threshold >= 1.0) {
            return Err(Error::Config("refit ssim_weight must be ≥ 0 and elongation_threshold ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefitReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Gaussians changed by interleaved normalization passes.
    pub normalized: usize,
    /// Set when the best snapshot was restored over the last iterate.
    pub restored_best: bool,
}

/// Unconstrained parameterization of the refit variables.
struct Params {
    mean: Vec<f64>,
    log_scale: Vec<f64>,
    rotation: Vec<f64>,
    logit_opacity: Vec<f64>,
    color: Vec<f64>,
}

impl Params {
    fn from_scene(scene: &GaussianScene) -> Self {
        let mut p = Params {
            mean: Vec::with_capacity(scene.len() * 3),
            log_scale: Vec::with_capacity(scene.len() * 3),
            rotation: Vec::with_capacity(scene.len() * 4),
            logit_opacity: Vec::with_capacity(scene.len()),
            color: Vec::with_capacity(scene.len() * 3),
        };
        for g in &scene.gaussians {
            p.mean.extend(g.mean.iter());
            p.log_scale.extend(g.scales.iter().map(|s| s.ln()));
            p.rotation.extend(g.rotation);
            let o = g.opacity.clamp(OPACITY_FLOOR, 1.0 - OPACITY_FLOOR);
            p.logit_opacity.push((o / (1.0 - o)).ln());
            p.color.extend(g.color_gt.iter());
        }
        p
    }

    /// Writes back into the scene, renormalizing quaternions and clamping colors.
    fn store(&mut self, scene: &mut GaussianScene) -> Result<()> {
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.mean = Vector3::from_column_slice(&self.mean[3 * i..3 * i + 3]);
            g.scales = Vector3::from_iterator(self.log_scale[3 * i..3 * i + 3].iter().map(|v| v.exp()));
            let q = normalize_quat(&[
                self.rotation[4 * i],
                self.rotation[4 * i + 1],
                self.rotation[4 * i + 2],
                self.rotation[4 * i + 3],
            ])
            .map_err(|e| Error::Diverged(format!("Gaussian {i}: {e}")))?;
            self.rotation[4 * i..4 * i + 4].copy_from_slice(&q);
            g.rotation = q;
            g.opacity = 1.0 / (1.0 + (-self.logit_opacity[i]).exp());
            for k in 0..3 {
                let c = self.color[3 * i + k].clamp(0.0, 1.0);
                self.color[3 * i + k] = c;
                g.color_gt[k] = c;
            }
            if !(g.mean.iter().all(|v| v.is_finite()) && g.scales.iter().all(|s| s.is_finite() && *s > 0.0)) {
                return Err(Error::Diverged(format!("Gaussian {i} left the finite range")));
            }
        }
        Ok(())
    }
}

struct Optim {
    mean: AdamState,
    log_scale: AdamState,
    rotation: AdamState,
    logit_opacity: AdamState,
    color: AdamState,
}

impl Optim {
    fn new(n: usize) -> Self {
        Self {
            mean: AdamState::new(3 * n),
            log_scale: AdamState::new(3 * n),
            rotation: AdamState::new(4 * n),
            logit_opacity: AdamState::new(n),
            color: AdamState::new(3 * n),
        }
    }
}

/// Snapshot of everything the refit may change.
#[derive(Clone)]
struct Snapshot(Vec<(Vector3<f64>, [f64; 4], Vector3<f64>, f64, Vector3<f64>)>);

impl Snapshot {
    fn take(scene: &GaussianScene) -> Self {
        Snapshot(
            scene
                .gaussians
                .iter()
                .map(|g| (g.mean, g.rotation, g.scales, g.opacity, g.color_gt))
                .collect(),
        )
    }

    fn restore(&self, scene: &mut GaussianScene) {
        for (g, s) in scene.gaussians.iter_mut().zip(&self.0) {
            (g.mean, g.rotation, g.scales, g.opacity, g.color_gt) = *s;
        }
    }
}

/// Tracks window means for the divergence guard.
struct Guard {
    window: usize,
    patience: usize,
    tolerance: f64,
    acc: f64,
    count: usize,
    prev: Option<f64>,
    rises: usize,
    history: Vec<f64>,
}

impl Guard {
    fn new(cfg: &RefitConfig) -> Self {
        Self {
            window: cfg.eval_window,
            patience: cfg.patience,
            tolerance: cfg.increase_tolerance,
            acc: 0.0,
            count: 0,
            prev: None,
            rises: 0,
            history: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.acc = 0.0;
        self.count = 0;
        self.prev = None;
        self.rises = 0;
    }

    fn push(&mut self, loss: f64) -> Result<()> {
        self.acc += loss;
        self.count += 1;
        if self.count < self.window {
            return Ok(());
        }
        let mean = self.acc / self.count as f64;
        self.history.push(mean);
        self.acc = 0.0;
        self.count = 0;
        if let Some(prev) = self.prev {
            if mean > prev * (1.0 + self.tolerance) + 1e-12 {
                self.rises += 1;
            } else {
                self.rises = 0;
            }
        }
        self.prev = Some(mean);
        if self.rises >= self.patience {
            let tail: Vec<String> = self.history.iter().rev().take(self.patience + 1).rev().map(|v| format!("{v:.6e}")).collect();
            return Err(Error::Diverged(format!(
                "refit loss rose over {} consecutive windows of {} steps (window means {})",
                self.patience,
                self.window,
                tail.join(" → ")
            )));
        }
        Ok(())
    }
}

/// Adam over mean, log-scale, quaternion, logit-opacity and `c_gt`.
///
/// The best iterate since the last normalization pass is restored at the
/// end, so without interleaved normalization the final loss never exceeds
/// the initial one.
pub fn geometry_refit(scene: &mut GaussianScene, views: &[View], cfg: &RefitConfig) -> Result<RefitReport> {
    cfg.validate()?;
    scene.validate()?;
    let mut report = RefitReport::default();
    let initial = refit_loss(scene, views, cfg.ssim_weight)?;
    report.initial_loss = initial;
    report.final_loss = initial;
    if cfg.steps == 0 {
        return Ok(report);
    }

    let n = scene.len();
    let extent = scene.extent().max(1e-3);
    let mut params = Params::from_scene(scene);
    let mut opt = Optim::new(n);
    let mut guard = Guard::new(cfg);
    let mut best = (f64::INFINITY, Snapshot::take(scene));

    for step in 0..cfg.steps {
        if cfg.normalize_every > 0 && step > 0 && step % cfg.normalize_every == 0 {
            let changed = crate::preprocess::normalize_narrow(scene, cfg.elongation_threshold);
            if changed > 0 {
                report.normalized += changed;
                params = Params::from_scene(scene);
                opt = Optim::new(n);
                guard.reset();
                best = (f64::INFINITY, Snapshot::take(scene));
            }
        }
        let (loss, g) = refit_objective(scene, views, cfg.ssim_weight)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite refit loss at step {step}")));
        }
        if loss < best.0 {
            best = (loss, Snapshot::take(scene));
        }
        guard.push(loss).map_err(|e| Error::Diverged(format!("step {step}: {e}")))?;

        let flat = |f: &dyn Fn(usize) -> Vec<f64>| -> Vec<f64> { (0..n).flat_map(f).collect() };
        let g_mean = flat(&|i| g.mean[i].iter().copied().collect());
        let g_log_scale = flat(&|i| (0..3).map(|k| g.scales[i][k] * scene.gaussians[i].scales[k]).collect());
        let g_rot = flat(&|i| g.rotation[i].to_vec());
        let g_logit = flat(&|i| {
            let o = scene.gaussians[i].opacity;
            vec![g.opacity[i] * o * (1.0 - o)]
        });
        let g_color = flat(&|i| g.color[i].iter().copied().collect());

        opt.mean.step(&mut params.mean, &g_mean, cfg.lr_mean * extent)?;
        opt.log_scale.step(&mut params.log_scale, &g_log_scale, cfg.lr_log_scale)?;
        opt.rotation.step(&mut params.rotation, &g_rot, cfg.lr_rotation)?;
        opt.logit_opacity.step(&mut params.logit_opacity, &g_logit, cfg.lr_logit_opacity)?;
        opt.color.step(&mut params.color, &g_color, cfg.lr_color)?;
        params.store(scene)?;
        report.steps = step + 1;
    }

    let last = refit_loss(scene, views, cfg.ssim_weight)?;
    if last <= best.0 {
        report.final_loss = last;
    } else {
        best.1.restore(scene);
        report.final_loss = best.0;
        report.restored_best = true;
    }
    Ok(report)
}
