//! Stylization loop: Adam on style colors, gradient-norm accumulation,
//! periodic splitting and geometry refits.

mod adam;
mod refit;

pub use adam::{lr_at, AdamState, Schedule, BETA1, BETA2, EPSILON};
pub use refit::{
    geometry_refit, l1_loss, photometric_loss, refit_loss, refit_objective, ssim_proxy, RefitConfig, RefitReport,
    SSIM_C1, SSIM_C2, SSIM_WINDOW,
};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Encoder, FeatureMap};
use crate::losses::{total_loss, LossWeights, StyleTargets, ViewInput};
use crate::preprocess::{split_in_place, SplitMode};
use crate::profile::Profile;
use crate::render::{render, render_backward_colors};
use crate::scene::{ColorSource, GaussianScene};
use crate::scene_io::View;

/// Per-Gaussian running sum of style-color gradient norms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccumulationBuffer {
    pub values: Vec<f64>,
    pub iterations_since_reset: usize,
}

impl AccumulationBuffer {
    pub fn new(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            iterations_since_reset: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reset_all(&mut self) {
        self.values.fill(0.0);
        self.iterations_since_reset = 0;
    }
}

/// `B_i += ‖∂L/∂c_s,i‖₂`.
pub fn accumulate_gradnorms(buffer: &mut AccumulationBuffer, color_grads: &[Vector3<f64>]) -> Result<()> {
    if buffer.len() != color_grads.len() {
        return Err(Error::mismatch("accumulation buffer", buffer.len(), color_grads.len()));
    }
    for (b, g) in buffer.values.iter_mut().zip(color_grads) {
        *b += g.norm();
    }
    buffer.iterations_since_reset += 1;
    Ok(())
}

/// Indices of the `k` largest values (ties to the lower index), ascending.
pub fn select_top(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// Splits the `⌊N·p⌋` Gaussians with the largest accumulated gradient.
///
/// The first child replaces its parent, the second is appended; both start
/// with `B = 0`. Returns the split parent indices.
pub fn select_and_split(
    scene: &mut GaussianScene,
    buffer: &mut AccumulationBuffer,
    split_percent: f64,
    mode: SplitMode,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&split_percent) {
        return Err(Error::InvalidInput(format!("split_percent {split_percent} outside [0, 1]")));
    }
    if buffer.len() != scene.len() {
        return Err(Error::mismatch("accumulation buffer", scene.len(), buffer.len()));
    }
    let k = (scene.len() as f64 * split_percent).floor() as usize;
    let parents = select_top(&buffer.values, k);
    let appended = split_in_place(scene, &parents, mode, rng);
    for &i in &parents {
        buffer.values[i] = 0.0;
    }
    buffer.values.resize(buffer.len() + appended.len(), 0.0);
    debug_assert_eq!(buffer.len(), scene.len());
    Ok(parents)
}

/// Adam moments over the flattened style colors plus the learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub color: AdamState,
    pub schedule: Schedule,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(num_gaussians: usize, schedule: Schedule) -> Self {
        Self {
            color: AdamState::new(3 * num_gaussians),
            schedule,
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        lr_at(&self.schedule, self.step)
    }

    /// Zeroes moments of split parents and grows to `new_len` Gaussians.
    pub fn on_split(&mut self, parents: &[usize], new_len: usize) {
        for &i in parents {
            self.color.reset_range(3 * i, 3);
        }
        self.color.resize(3 * new_len);
    }

    /// One Adam step on `c_s`, clamped to `[0, 1]`. Geometry and `c_gt` are
    /// left untouched.
    pub fn step_colors(&mut self, scene: &mut GaussianScene, grads: &[Vector3<f64>]) -> Result<f64> {
        if grads.len() != scene.len() || self.color.len() != 3 * scene.len() {
            return Err(Error::mismatch("style color step", 3 * scene.len(), self.color.len()));
        }
        let lr = self.lr();
        let mut params: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.color_style.iter().copied()).collect();
        let flat: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        self.color.step(&mut params, &flat, lr)?;
        for (g, c) in scene.gaussians.iter_mut().zip(params.chunks_exact(3)) {
            g.color_style = Vector3::new(c[0], c[1], c[2]).map(|v| v.clamp(0.0, 1.0));
        }
        self.step += 1;
        Ok(lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StylizeConfig {
    pub epochs: usize,
    pub profile: Profile,
    pub split_percent: f64,
    /// Iterations between split events; 0 means one full pass over the views.
    pub split_period: usize,
    pub refit_steps: usize,
    /// Reset every buffer entry after a split, not only the split parents.
    pub reset_buffer_on_split: bool,
    /// Stop when an epoch improves the mean total loss by less than this
    /// fraction; 0 disables.
    pub early_stop_tolerance: f64,
    /// Bound on the style feature cells searched by NNFM; 0 keeps all.
    pub max_style_cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_start: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_end: Option<f64>,
    pub refit: RefitConfig,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            profile: Profile::Forward,
            split_percent: 0.01,
            split_period: 0,
            refit_steps: 100,
            reset_buffer_on_split: false,
            early_stop_tolerance: 0.0,
            max_style_cells: 4096,
            lr_start: None,
            lr_end: None,
            refit: RefitConfig::default(),
        }
    }
}

impl StylizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("stylize epochs must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.split_percent) {
            return Err(Error::Config(format!("split_percent {} outside [0, 1]", self.split_percent)));
        }
        if !(self.early_stop_tolerance >= 0.0) {
            return Err(Error::Config("early_stop_tolerance must be ≥ 0".into()));
        }
        self.refit.validate()?;
        let (a, b) = self.lr_range();
        Schedule::new(a, b, 1).map(|_| ()).map_err(|e| Error::Config(e.to_string()))
    }

    /// Profile learning rates with any overrides applied.
    pub fn lr_range(&self) -> (f64, f64) {
        let (a, b) = self.profile.lr_range();
        (self.lr_start.unwrap_or(a), self.lr_end.unwrap_or(b))
    }

    pub fn split_period_for(&self, num_views: usize) -> usize {
        if self.split_period == 0 {
            num_views.max(1)
        } else {
            self.split_period
        }
    }

    pub fn refit_config(&self) -> RefitConfig {
        RefitConfig {
            steps: self.refit_steps,
            normalize_every: 0,
            ..self.refit.clone()
        }
    }
}

/// One JSON-lines record per optimizer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub epoch: usize,
    pub iteration: usize,
    pub view: usize,
    pub lr: f64,
    pub clip: f64,
    pub nnfm: f64,
    pub content: f64,
    pub tv: f64,
    pub total: f64,
    pub gaussians: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub iteration: usize,
    pub parents: Vec<usize>,
    pub gaussians_after: usize,
    pub refit: RefitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub iterations: usize,
    pub mean_total: f64,
    pub splits: Vec<SplitEvent>,
    pub gaussians: usize,
}

/// Stylization state carried across epochs.
pub struct Stylizer {
    pub cfg: StylizeConfig,
    pub weights: LossWeights,
    pub encoder: Encoder,
    pub style: StyleTargets,
    pub gt_features: Vec<FeatureMap>,
    pub optimizer: OptimizerState,
    pub buffer: AccumulationBuffer,
    pub split_mode: SplitMode,
    pub iteration: usize,
    num_views: usize,
}

impl Stylizer {
    /// Encodes the ground-truth views once; `views` must already carry any
    /// color correction.
    pub fn new(
        cfg: StylizeConfig,
        weights: LossWeights,
        encoder: Encoder,
        style: StyleTargets,
        views: &[View],
        scene: &GaussianScene,
        split_mode: SplitMode,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidInput("stylization needs at least one view".into()));
        }
        let gt_features = views.iter().map(|v| encoder.encode_map(&v.image)).collect::<Result<Vec<_>>>()?;
        let (a, b) = cfg.lr_range();
        let schedule = Schedule::new(a, b, cfg.epochs * views.len())?;
        Ok(Self {
            optimizer: OptimizerState::new(scene.len(), schedule),
            buffer: AccumulationBuffer::new(scene.len()),
            cfg,
            weights,
            encoder,
            style,
            gt_features,
            split_mode,
            iteration: 0,
            num_views: views.len(),
        })
    }

    /// One color-only iteration on view `vi`.
    pub fn color_step(&mut self, scene: &mut GaussianScene, views: &[View], vi: usize) -> Result<IterationMetrics> {
        let view = &views[vi];
        let out = render(scene, &view.camera, ColorSource::Style);
        let input = ViewInput {
            render: &out.image,
            gt_features: &self.gt_features[vi],
        };
        let loss = total_loss(&self.encoder, &[input], &self.style, &self.weights)?;
        let grads = render_backward_colors(&out, &loss.grad_images[0])?;
        accumulate_gradnorms(&mut self.buffer, &grads)?;
        let lr = self.optimizer.step_colors(scene, &grads)?;
        Ok(IterationMetrics {
            epoch: 0,
            iteration: self.iteration,
            view: vi,
            lr,
            clip: loss.clip,
            nnfm: loss.nnfm,
            content: loss.content,
            tv: loss.tv,
            total: loss.total,
            gaussians: scene.len(),
        })
    }

    /// Split the top Gaussians, then refit geometry against the views.
    pub fn split_and_refit(&mut self, scene: &mut GaussianScene, views: &[View], rng: &mut impl Rng) -> Result<SplitEvent> {
        let parents = select_and_split(scene, &mut self.buffer, self.cfg.split_percent, self.split_mode, rng)?;
        self.optimizer.on_split(&parents, scene.len());
        if self.cfg.reset_buffer_on_split {
            self.buffer.reset_all();
        }
        let style_before: Vec<Vector3<f64>> = scene.gaussians.iter().map(|g| g.color_style).collect();
        let refit = geometry_refit(scene, views, &self.cfg.refit_config())?;
        debug_assert!(scene.gaussians.iter().zip(&style_before).all(|(g, c)| g.color_style == *c));
        Ok(SplitEvent {
            iteration: self.iteration,
            parents,
            gaussians_after: scene.len(),
            refit,
        })
    }

    /// Round-robin pass over all views with the configured split cadence.
    pub fn run_epoch(
        &mut self,
        epoch: usize,
        scene: &mut GaussianScene,
        views: &[View],
        rng: &mut impl Rng,
        sink: &mut dyn FnMut(&IterationMetrics) -> Result<()>,
    ) -> Result<EpochSummary> {
        if views.len() != self.num_views || self.gt_features.len() != views.len() {
            return Err(Error::mismatch("stylize views", self.num_views, views.len()));
        }
        let period = self.cfg.split_period_for(views.len());
        let mut splits = Vec::new();
        let mut sum = 0.0;
        for vi in 0..views.len() {
            let mut m = self.color_step(scene, views, vi)?;
            m.epoch = epoch;
            sum += m.total;
            sink(&m)?;
            self.iteration += 1;
            if self.iteration.is_multiple_of(period) && (self.cfg.split_percent > 0.0 || self.cfg.refit_steps > 0) {
                splits.push(self.split_and_refit(scene, views, rng)?);
            }
        }
        Ok(EpochSummary {
            epoch,
            iterations: views.len(),
            mean_total: sum / views.len() as f64,
            splits,
            gaussians: scene.len(),
        })
    }
}
