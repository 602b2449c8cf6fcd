//! Affine color transfer matching the mean and covariance of two pixel clouds.
//!
//! The fitted map is `x ↦ A (x − μ_C) + μ_S` with `A = L_S L_C⁻¹`, where the
//! `L` are Cholesky factors of the regularized covariances.

use nalgebra::{Cholesky, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scene::{clamp01, ColorSource, GaussianScene};

/// Ridge added to both covariances before factorization.
pub const COV_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorTransform {
    /// `A`, row-major when serialized.
    #[serde(with = "mat3_rows")]
    pub matrix: Matrix3<f64>,
    /// `μ_S − A μ_C`.
    #[serde(with = "vec3")]
    pub offset: Vector3<f64>,
}

impl ColorTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
            offset: Vector3::zeros(),
        }
    }

    /// Affine map without clamping.
    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * x + self.offset
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().chain(self.offset.iter()).all(|v| v.is_finite())
    }
}

mod mat3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

mod vec3 {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        Ok(Vector3::from(<[f64; 3]>::deserialize(d)?))
    }
}

/// Mean and population covariance of a pixel cloud.
pub fn color_moments(pixels: &[Vector3<f64>]) -> (Vector3<f64>, Matrix3<f64>) {
    let n = pixels.len() as f64;
    let mean = pixels.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = pixels.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    }) / n;
    (mean, cov)
}

fn cholesky_factor(cov: &Matrix3<f64>, what: &str) -> Result<Matrix3<f64>> {
    let reg = cov + Matrix3::identity() * COV_EPS;
    Cholesky::new(reg)
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidInput(format!("{what} covariance is not positive definite")))
}

/// Fits the transform taking `source` statistics onto `target` statistics.
pub fn fit_color_transform(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<ColorTransform> {
    if source.len() < 2 || target.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "color matching needs at least 2 pixels per side, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let (mu_c, cov_c) = color_moments(source);
    let (mu_s, cov_s) = color_moments(target);
    if !(mu_c.iter().chain(cov_c.iter()).chain(mu_s.iter()).chain(cov_s.iter())).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite color statistics".into()));
    }
    let l_c = cholesky_factor(&cov_c, "source")?;
    let l_s = cholesky_factor(&cov_s, "target")?;
    let l_c_inv = l_c
        .solve_lower_triangular(&Matrix3::identity())
        .ok_or_else(|| Error::InvalidInput("singular source factor".into()))?;
    let matrix = l_s * l_c_inv;
    let t = ColorTransform {
        matrix,
        offset: mu_s - matrix * mu_c,
    };
    if !t.is_finite() {
        return Err(Error::InvalidInput("non-finite color transform".into()));
    }
    Ok(t)
}

/// All pixels of a set of images, in order.
pub fn collect_pixels<'a>(images: impl IntoIterator<Item = &'a ImageBuffer>) -> Vec<Vector3<f64>> {
    images.into_iter().flat_map(|img| img.pixels()).collect()
}

pub fn apply_to_image(t: &ColorTransform, image: &ImageBuffer) -> ImageBuffer {
    image.map_pixels(|p| clamp01(&t.apply(&p)))
}

/// Transforms one color set of every Gaussian and the background, clamped.
pub fn apply_to_scene(t: &ColorTransform, scene: &GaussianScene, which: ColorSource) -> GaussianScene {
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        let c = g.color_mut(which);
        *c = clamp01(&t.apply(c));
    }
    out.background = clamp01(&t.apply(&out.background));
    out
}
