//! Feature extraction behind the style losses.
//!
//! The built-in [`Encoder`] is a three-block pyramid of bias-free 3×3
//! convolutions, ReLU and 2×2 average pooling with seeded, orthogonalized
//! random filters. Externally computed feature maps can be brought in through
//! the `GFEA` file format ([`import_features`] / [`export_features`]).

mod encoder;
mod format;

pub use encoder::{global_to_map_grad, spatial_mean, Encoder, EncoderSpec};
pub use format::{export_features, import_features, read_features, write_features};

use crate::error::{Error, Result};

/// Dense `height × width × channels` grid, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::mismatch(
                "feature map",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector at linear cell index `i` (`row * width + col`).
    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn cells(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Unit-norm global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature {
    pub vector: Vec<f64>,
    /// Set when the pooled descriptor was exactly zero; `vector` is then the
    /// zero vector rather than a unit vector.
    pub degenerate: bool,
}

impl GlobalFeature {
    pub fn from_vector(mut vector: Vec<f64>) -> Self {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self {
                vector,
                degenerate: true,
            };
        }
        vector.iter_mut().for_each(|v| *v /= norm);
        Self {
            vector,
            degenerate: false,
        }
    }
}
