//! Gaussian scene data model.
//!
//! Quaternions are stored as `[w, x, y, z]` everywhere, including PLY I/O
//! (`rot_0` is `w`). Opacity and scales are kept in natural units; the
//! optimizers own any logit/log reparameterization.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit quaternion `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

/// Which of the two per-Gaussian colors a render or transform works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSource {
    /// Reconstruction color `c_gt`.
    Gt,
    /// Stylized color `c_s`.
    Style,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub rotation: Quat,
    pub scales: Vector3<f64>,
    pub opacity: f64,
    pub color_gt: Vector3<f64>,
    pub color_style: Vector3<f64>,
}

impl Gaussian {
    /// Gaussian with `c_s` initialized to `c_gt`.
    pub fn new(
        mean: Vector3<f64>,
        rotation: Quat,
        scales: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        Self {
            mean,
            rotation,
            scales,
            opacity,
            color_gt: color,
            color_style: color,
        }
    }

    pub fn color(&self, source: ColorSource) -> &Vector3<f64> {
        match source {
            ColorSource::Gt => &self.color_gt,
            ColorSource::Style => &self.color_style,
        }
    }

    pub fn color_mut(&mut self, source: ColorSource) -> &mut Vector3<f64> {
        match source {
            ColorSource::Gt => &mut self.color_gt,
            ColorSource::Style => &mut self.color_style,
        }
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from(&self.rotation, &self.scales)
    }

    /// Checks the data-model invariants.
    pub fn validate(&self) -> Result<()> {
        let finite = self.mean.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.scales.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.color_gt.iter().all(|v| v.is_finite())
            && self.color_style.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite Gaussian parameter".into()));
        }
        if (quat_norm(&self.rotation) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "quaternion norm {} is not 1",
                quat_norm(&self.rotation)
            )));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "scales must be positive, got {:?}",
                self.scales.as_slice()
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidInput(format!(
                "opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        Ok(())
    }

    /// Clamps both colors and the opacity into `[0, 1]`.
    pub fn clamp_colors(&mut self) {
        self.color_gt = clamp01(&self.color_gt);
        self.color_style = clamp01(&self.color_style);
        self.opacity = self.opacity.clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub background: Vector3<f64>,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self {
            gaussians,
            background: Vector3::zeros(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.is_empty() {
            return Err(Error::InvalidInput("scene has no Gaussians".into()));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::InvalidInput(format!("Gaussian {i}: {e}")))?;
        }
        Ok(())
    }

    /// Radius of the bounding sphere of the means around their centroid.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        let centroid = self
            .gaussians
            .iter()
            .fold(Vector3::zeros(), |acc, g| acc + g.mean)
            / self.gaussians.len() as f64;
        self.gaussians
            .iter()
            .map(|g| (g.mean - centroid).norm())
            .fold(0.0, f64::max)
    }
}

/// Per-Gaussian geometric statistics of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStats {
    pub areas: Vec<f64>,
    pub elongations: Vec<f64>,
    pub mean_area: f64,
    /// Population standard deviation of `areas`.
    pub std_area: f64,
}

pub fn clamp01(c: &Vector3<f64>) -> Vector3<f64> {
    c.map(|v| v.clamp(0.0, 1.0))
}

pub fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let n = quat_norm(q);
    if !n.is_finite() || n == 0.0 {
        return Err(Error::InvalidInput(format!("cannot normalize quaternion {q:?}")));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R diag(s²) Rᵀ`.
pub fn covariance_from(rotation: &Quat, scales: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !rotation.iter().chain(scales.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(
            "non-finite rotation or scales in covariance".into(),
        ));
    }
    let r = rotation_matrix(rotation);
    let d = Matrix3::from_diagonal(&scales.component_mul(scales));
    Ok(r * d * r.transpose())
}

fn sorted_desc(scales: &Vector3<f64>) -> [f64; 3] {
    let mut s = [scales.x, scales.y, scales.z];
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Product of the two largest scale components.
pub fn projected_area(scales: &Vector3<f64>) -> f64 {
    let s = sorted_desc(scales);
    s[0] * s[1]
}

/// Largest scale component divided by the second largest.
pub fn elongation(scales: &Vector3<f64>) -> f64 {
    let s = sorted_desc(scales);
    s[0] / s[1]
}

pub fn scene_stats(scene: &GaussianScene) -> Result<SceneStats> {
    if scene.is_empty() {
        return Err(Error::InvalidInput("scene_stats on an empty scene".into()));
    }
    let areas: Vec<f64> = scene
        .gaussians
        .iter()
        .map(|g| projected_area(&g.scales))
        .collect();
    let elongations = scene
        .gaussians
        .iter()
        .map(|g| elongation(&g.scales))
        .collect();
    let n = areas.len() as f64;
    let mean_area = areas.iter().sum::<f64>() / n;
    let var = areas.iter().map(|a| (a - mean_area).powi(2)).sum::<f64>() / n;
    Ok(SceneStats {
        areas,
        elongations,
        mean_area,
        std_area: var.sqrt(),
    })
}
