//! Scene normalization before stylization: split oversized flat Gaussians,
//! narrow elongated ones, and refit against the ground-truth views.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fine_tune::{geometry_refit, RefitConfig, RefitReport};
use crate::scene::{clamp01, elongation, rotation_matrix, scene_stats, Gaussian, GaussianScene};
use crate::scene_io::View;

/// Child scales are the parent's divided by this.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
/// Deterministic children sit this many largest-scale units from the mean.
pub const SPLIT_OFFSET: f64 = 0.8;
/// Cap on the final normalization passes.
pub const MAX_FINAL_PASSES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Child means drawn from the parent density.
    #[default]
    Stochastic,
    /// Children at `mean ± 0.8·s_max·axis`.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub rounds: usize,
    pub gamma_init: f64,
    pub gamma_growth: f64,
    pub elongation_threshold: f64,
    pub refit_steps_per_round: usize,
    /// Interleaved `normalize_narrow` cadence inside each refit (0 disables).
    pub normalize_every: usize,
    pub refit: RefitConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            gamma_init: 1.1,
            gamma_growth: 1.125,
            elongation_threshold: 1.5,
            refit_steps_per_round: 300,
            normalize_every: 100,
            refit: RefitConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("preprocess rounds must be ≥ 1".into()));
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return Err(Error::Config(format!("gamma_init must be > 0, got {}", self.gamma_init)));
        }
        if !(self.gamma_growth > 0.0 && self.gamma_growth.is_finite()) {
            return Err(Error::Config(format!("gamma_growth must be > 0, got {}", self.gamma_growth)));
        }
        if !(self.elongation_threshold >= 1.0) {
            return Err(Error::Config(format!(
                "elongation_threshold must be ≥ 1, got {}",
                self.elongation_threshold
            )));
        }
        self.refit.validate()
    }

    /// `γ_r = γ · growth^r` for `r = 0 .. rounds`.
    pub fn gamma_schedule(&self) -> Vec<f64> {
        (0..self.rounds).map(|r| self.gamma_init * self.gamma_growth.powi(r as i32)).collect()
    }

    fn refit_config(&self) -> RefitConfig {
        RefitConfig {
            steps: self.refit_steps_per_round,
            normalize_every: self.normalize_every,
            elongation_threshold: self.elongation_threshold,
            ..self.refit.clone()
        }
    }
}

/// Flatness threshold `t_f = μ_A + γ σ_A`.
pub fn flat_threshold(scene: &GaussianScene, gamma: f64) -> Result<f64> {
    let s = scene_stats(scene)?;
    Ok(s.mean_area + gamma * s.std_area)
}

/// Indices with projected area strictly above `μ_A + γ σ_A`, ascending.
pub fn mark_flat(scene: &GaussianScene, gamma: f64) -> Result<Vec<usize>> {
    let s = scene_stats(scene)?;
    let t = s.mean_area + gamma * s.std_area;
    Ok(s.areas.iter().enumerate().filter(|(_, a)| **a > t).map(|(i, _)| i).collect())
}

fn largest_axis(g: &Gaussian) -> usize {
    let s = &g.scales;
    let mut k = 0;
    for i in 1..3 {
        if s[i] > s[k] {
            k = i;
        }
    }
    k
}

/// Two children sharing rotation, opacity and colors, with scales ÷ 1.6.
pub fn split_gaussian(g: &Gaussian, mode: SplitMode, rng: &mut impl Rng) -> [Gaussian; 2] {
    let r = rotation_matrix(&g.rotation);
    let mut child = g.clone();
    child.scales = g.scales / SPLIT_SCALE_DIVISOR;
    let (m1, m2) = match mode {
        SplitMode::Deterministic => {
            let k = largest_axis(g);
            let offset = r.column(k) * (SPLIT_OFFSET * g.scales[k]);
            (g.mean + offset, g.mean - offset)
        }
        SplitMode::Stochastic => {
            let mut draw = || {
                let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                g.mean + r * g.scales.component_mul(&z)
            };
            let a = draw();
            (a, draw())
        }
    };
    let mut c1 = child.clone();
    c1.mean = m1;
    child.mean = m2;
    [c1, child]
}

/// Splits `indices` (ascending, unique) in place: the first child takes the
/// parent's slot, the second is appended. Returns the appended positions.
pub fn split_in_place(
    scene: &mut GaussianScene,
    indices: &[usize],
    mode: SplitMode,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut appended = Vec::with_capacity(indices.len());
    for &i in indices {
        let [a, b] = split_gaussian(&scene.gaussians[i], mode, rng);
        scene.gaussians[i] = a;
        appended.push(scene.gaussians.len());
        scene.gaussians.push(b);
    }
    appended
}

/// Replaces the largest scale by the mean of the two largest wherever the
/// elongation exceeds `t_e`. Returns the number of Gaussians changed.
pub fn normalize_narrow(scene: &mut GaussianScene, t_e: f64) -> usize {
    let mut changed = 0;
    for g in &mut scene.gaussians {
        if elongation(&g.scales) > t_e {
            let k = largest_axis(g);
            let second = (0..3).filter(|&i| i != k).map(|i| g.scales[i]).fold(f64::NEG_INFINITY, f64::max);
            g.scales[k] = (g.scales[k] + second) / 2.0;
            changed += 1;
        }
    }
    changed
}

/// Repeats [`normalize_narrow`] until nothing exceeds `t_e`. Returns
/// `(passes that changed something, total changes)`.
pub fn normalize_until_bounded(scene: &mut GaussianScene, t_e: f64) -> Result<(usize, usize)> {
    let mut total = 0;
    for pass in 0..MAX_FINAL_PASSES {
        let n = normalize_narrow(scene, t_e);
        if n == 0 {
            return Ok((pass, total));
        }
        total += n;
    }
    if scene.gaussians.iter().any(|g| elongation(&g.scales) > t_e) {
        return Err(Error::InvalidInput(format!(
            "elongation still above {t_e} after {MAX_FINAL_PASSES} normalization passes"
        )));
    }
    Ok((MAX_FINAL_PASSES, total))
}

/// Drops everything but the diffuse color. The runtime model only stores
/// diffuse colors, so this clamps them and is idempotent.
pub fn diffuse_reduce(scene: &GaussianScene) -> GaussianScene {
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        g.color_gt = clamp01(&g.color_gt);
        g.color_style = clamp01(&g.color_style);
    }
    out.background = clamp01(&out.background);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub gamma: f64,
    pub flat_threshold: f64,
    pub split: Vec<usize>,
    pub normalized: usize,
    pub gaussians: usize,
    pub refit: RefitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub rounds: Vec<RoundReport>,
    pub final_passes: usize,
    pub final_normalized: usize,
    pub max_elongation: f64,
}

/// Rounds of mark → split → normalize → refit, then normalization until no
/// Gaussian is elongated beyond the threshold.
pub fn preprocess_pipeline(
    scene: &GaussianScene,
    views: &[View],
    cfg: &PreprocessConfig,
    mode: SplitMode,
    rng: &mut impl Rng,
) -> Result<(GaussianScene, PreprocessReport)> {
    cfg.validate()?;
    scene.validate()?;
    let mut scene = diffuse_reduce(scene);
    let refit_cfg = cfg.refit_config();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for (round, gamma) in cfg.gamma_schedule().into_iter().enumerate() {
        let threshold = flat_threshold(&scene, gamma)?;
        let marked = mark_flat(&scene, gamma)?;
        split_in_place(&mut scene, &marked, mode, rng);
        let normalized = normalize_narrow(&mut scene, cfg.elongation_threshold);
        let refit = geometry_refit(&mut scene, views, &refit_cfg)
            .map_err(|e| Error::Diverged(format!("preprocess round {}: {e}", round + 1)))?;
        rounds.push(RoundReport {
            round: round + 1,
            gamma,
            flat_threshold: threshold,
            split: marked,
            normalized,
            gaussians: scene.len(),
            refit,
        });
    }
    let (final_passes, final_normalized) = normalize_until_bounded(&mut scene, cfg.elongation_threshold)?;
    let max_elongation = scene.gaussians.iter().map(|g| elongation(&g.scales)).fold(0.0, f64::max);
    Ok((
        scene,
        PreprocessReport {
            rounds,
            final_passes,
            final_normalized,
            max_elongation,
        },
    ))
}
