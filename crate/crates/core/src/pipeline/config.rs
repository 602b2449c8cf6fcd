use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EncoderSpec;
use crate::fine_tune::StylizeConfig;
use crate::losses::LossWeights;
use crate::preprocess::{PreprocessConfig, SplitMode};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub scene: PathBuf,
    pub dataset: PathBuf,
    /// Style image; defaults to `style.png` inside the dataset directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style: Option<PathBuf>,
    /// Output directory for renders, metrics and the run report.
    pub output: PathBuf,
    /// Defaults to `scene_stylized.ply` inside `output`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stylized_ply: Option<PathBuf>,
    /// Defaults to `metrics.jsonl` inside `output`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub no_color_match: bool,
    pub deterministic_split: bool,
    /// Bake the final color correction into `c_s`; otherwise it is applied
    /// to the exported renders only.
    pub bake_final_color: bool,
    pub skip_preprocess: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            no_color_match: false,
            deterministic_split: false,
            bake_final_color: true,
            skip_preprocess: false,
        }
    }
}

/// Per-weight overrides on top of the profile defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_nnfm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_content: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_tv: Option<f64>,
}

impl WeightOverrides {
    pub fn apply(&self, base: LossWeights) -> LossWeights {
        LossWeights {
            lambda_clip: self.lambda_clip.unwrap_or(base.lambda_clip),
            lambda_nnfm: self.lambda_nnfm.unwrap_or(base.lambda_nnfm),
            lambda_content: self.lambda_content.unwrap_or(base.lambda_content),
            lambda_tv: self.lambda_tv.unwrap_or(base.lambda_tv),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorMatchConfig {
    /// Refit steps after the initial transform to absorb clamping.
    pub refit_steps: usize,
}

impl Default for ColorMatchConfig {
    fn default() -> Self {
        Self { refit_steps: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for every random draw in the run.
    pub seed: u64,
    /// Replaces the background stored in the input scene.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<[f64; 3]>,
    pub paths: PathsConfig,
    pub flags: Flags,
    pub preprocess: PreprocessConfig,
    pub stylize: StylizeConfig,
    pub weights: WeightOverrides,
    pub encoder: EncoderSpec,
    pub color_match: ColorMatchConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loss weights for the configured profile with overrides applied.
    pub fn loss_weights(&self) -> LossWeights {
        self.weights.apply(LossWeights::for_profile(self.stylize.profile))
    }

    pub fn split_mode(&self) -> SplitMode {
        if self.flags.deterministic_split {
            SplitMode::Deterministic
        } else {
            SplitMode::Stochastic
        }
    }

    pub fn style_path(&self) -> PathBuf {
        self.paths
            .style
            .clone()
            .unwrap_or_else(|| self.paths.dataset.join(crate::scene_io::STYLE_FILE))
    }

    pub fn stylized_ply_path(&self) -> PathBuf {
        self.paths
            .stylized_ply
            .clone()
            .unwrap_or_else(|| self.paths.output.join(super::STYLIZED_PLY))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.paths
            .metrics
            .clone()
            .unwrap_or_else(|| self.paths.output.join(super::METRICS_FILE))
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.scene.as_os_str().is_empty() {
            return Err(Error::Config("paths.scene is not set".into()));
        }
        if self.paths.dataset.as_os_str().is_empty() {
            return Err(Error::Config("paths.dataset is not set".into()));
        }
        if self.paths.output.as_os_str().is_empty() {
            return Err(Error::Config("paths.output is not set".into()));
        }
        if let Some(bg) = self.background {
            if bg.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("background {bg:?} must lie in [0, 1]")));
            }
        }
        self.preprocess.validate()?;
        self.stylize.validate()?;
        self.loss_weights().validate()
    }
}
