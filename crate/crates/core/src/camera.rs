//! Pinhole camera with a world-to-camera rigid transform.
//!
//! Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)` in the continuous
//! image plane, so `cx = width / 2` puts the principal point at the image
//! center.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `+y` of the image pointing
    /// roughly along `-up` (image rows grow downward).
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            translation: -(rotation * eye),
            rotation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Dataset("camera has zero resolution".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Dataset(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let ortho = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !ortho.is_finite() || ortho > 1e-6 {
            return Err(Error::Dataset(format!(
                "camera rotation is not orthonormal (deviation {ortho:e})"
            )));
        }
        if !self.translation.iter().chain([self.cx, self.cy].iter()).all(|v| v.is_finite()) {
            return Err(Error::Dataset("non-finite camera parameters".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel-plane projection of a camera-space point (`z > 0` assumed).
    pub fn project(&self, t: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// On-disk camera record (`cameras.json` entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(image: impl Into<String>, cam: &Camera) -> Self {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = cam.rotation[(r, c)];
            }
        }
        Self {
            image: image.into(),
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation,
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let cam = Camera {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Matrix3::from_row_slice(&self.rotation),
            translation: Vector3::from(self.translation),
        };
        cam.validate()
            .map_err(|e| Error::Dataset(format!("camera for {}: {e}", self.image)))?;
        Ok(cam)
    }
}
