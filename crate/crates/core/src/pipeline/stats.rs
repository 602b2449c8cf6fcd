use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{scene_stats, GaussianScene};
use crate::scene_io::{decode_ply, read_ply_layout, SH3_COLOR_BYTES};

pub const HISTOGRAM_BINS: usize = 10;

/// Equal-width bins over `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        if values.is_empty() {
            return Self { min: 0.0, max: 0.0, counts };
        }
        let width = max - min;
        for v in values {
            let b = if width > 0.0 {
                (((v - min) / width) * bins as f64) as usize
            } else {
                0
            };
            counts[b.min(bins - 1)] += 1;
        }
        Self { min, max, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub path: PathBuf,
    pub gaussians: usize,
    pub file_bytes: usize,
    pub header_bytes: usize,
    pub bytes_per_gaussian: usize,
    pub color_bytes_per_gaussian: usize,
    /// Color bytes per Gaussian for a degree-3 SH encoding.
    pub sh3_color_bytes_per_gaussian: usize,
    /// Bytes the same Gaussians would take with SH3 colors.
    pub sh3_equivalent_bytes: usize,
    pub color_byte_savings: usize,
    pub opacity: Histogram,
    /// Product of the two largest scales.
    pub area: Histogram,
    pub elongation: Histogram,
    pub max_elongation: f64,
    pub mean_area: f64,
    pub std_area: f64,
}

/// Size accounting and distributions for a PLY scene.
pub fn stats(path: impl AsRef<Path>) -> Result<StatsReport> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let layout = read_ply_layout(path)?;
    let scene = decode_ply(&bytes, path)?;
    scene_report(path, bytes.len(), &layout, &scene)
}

fn scene_report(
    path: &Path,
    file_bytes: usize,
    layout: &crate::scene_io::PlyLayout,
    scene: &GaussianScene,
) -> Result<StatsReport> {
    let geo = scene_stats(scene)?;
    let color = layout.color_bytes_per_vertex();
    let sh3_stride = layout.stride - color + SH3_COLOR_BYTES;
    let sh3_equivalent_bytes = layout.header_bytes + sh3_stride * scene.len();
    let opacities: Vec<f64> = scene.gaussians.iter().map(|g| g.opacity).collect();
    Ok(StatsReport {
        path: path.to_path_buf(),
        gaussians: scene.len(),
        file_bytes,
        header_bytes: layout.header_bytes,
        bytes_per_gaussian: layout.stride,
        color_bytes_per_gaussian: color,
        sh3_color_bytes_per_gaussian: SH3_COLOR_BYTES,
        sh3_equivalent_bytes,
        color_byte_savings: sh3_equivalent_bytes.saturating_sub(file_bytes),
        opacity: Histogram::new(&opacities, HISTOGRAM_BINS),
        area: Histogram::new(&geo.areas, HISTOGRAM_BINS),
        elongation: Histogram::new(&geo.elongations, HISTOGRAM_BINS),
        max_elongation: geo.elongations.iter().copied().fold(0.0, f64::max),
        mean_area: geo.mean_area,
        std_area: geo.std_area,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ColorSource;
    use crate::scene_io::write_ply;
    use crate::synthetic::{synthetic_scene, SyntheticSpec};
    use rand::SeedableRng;

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new(&[0.0, 0.5, 1.0, 1.0, 0.25], 4);
        assert_eq!(h.total(), 5);
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
        assert_eq!(Histogram::new(&[2.0, 2.0], 3).counts, vec![2, 0, 0]);
        assert_eq!(Histogram::new(&[], 3).total(), 0);
    }

    #[test]
    fn byte_accounting() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_gaussians: 25,
            ..Default::default()
        };
        let scene = synthetic_scene(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let path = dir.path().join("s.ply");
        write_ply(&scene, ColorSource::Gt, &path).unwrap();
        let r = stats(&path).unwrap();
        assert_eq!(r.gaussians, 25);
        assert_eq!(r.color_bytes_per_gaussian, 12);
        assert_eq!(r.bytes_per_gaussian, 56);
        assert_eq!(r.file_bytes, r.header_bytes + 25 * 56);
        assert_eq!(r.sh3_equivalent_bytes - r.file_bytes, 25 * (192 - 12));
        assert_eq!(r.opacity.total(), 25);
        assert!(r.max_elongation >= 1.0);
    }
}
