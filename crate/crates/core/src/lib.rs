//! Gaussian-splat scene stylization.
//!
//! A CPU rasterizer with analytic gradients, a small convolutional feature
//! encoder, style and content losses, scene pre-processing, style-color
//! fine-tuning with gradient-driven splitting, and color moment matching.

pub mod camera;
pub mod error;
pub mod image;
pub mod render;
pub mod scene;
pub mod features;
pub mod losses;
pub mod profile;
pub mod color_match;
pub mod scene_io;
pub mod preprocess;
pub mod fine_tune;
pub mod gradcheck;
pub mod synthetic;
pub mod pipeline;

pub use nalgebra;

pub use camera::Camera;
pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use losses::LossWeights;
pub use pipeline::{PipelineConfig, RunReport};
pub use profile::Profile;
pub use scene::{ColorSource, Gaussian, GaussianScene};
pub use scene_io::{Dataset, View};
