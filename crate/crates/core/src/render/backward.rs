use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use super::{project_backward, RenderOutput};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scene::GaussianScene;

/// Per-Gaussian gradients, indexed by scene index. Culled Gaussians get zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub color: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub mean: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            color: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            mean: vec![Vector3::zeros(); n],
            scales: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
        }
    }

    pub fn accumulate(&mut self, other: &GaussianGrads) {
        for i in 0..self.color.len() {
            self.color[i] += other.color[i];
            self.opacity[i] += other.opacity[i];
            self.mean[i] += other.mean[i];
            self.scales[i] += other.scales[i];
            for k in 0..4 {
                self.rotation[i][k] += other.rotation[i][k];
            }
        }
    }
}

/// Splat-space accumulators for one chunk of rows.
struct SplatAccum {
    color: Vec<Vector3<f64>>,
    opacity: Vec<f64>,
    mean2d: Vec<Vector2<f64>>,
    conic: Vec<Matrix2<f64>>,
}

impl SplatAccum {
    fn zeros(n: usize, geometry: bool) -> Self {
        let m = if geometry { n } else { 0 };
        Self {
            color: vec![Vector3::zeros(); n],
            opacity: vec![0.0; m],
            mean2d: vec![Vector2::zeros(); m],
            conic: vec![Matrix2::zeros(); m],
        }
    }

    fn merge(&mut self, other: SplatAccum) {
        for (a, b) in self.color.iter_mut().zip(other.color) {
            *a += b;
        }
        for (a, b) in self.opacity.iter_mut().zip(other.opacity) {
            *a += b;
        }
        for (a, b) in self.mean2d.iter_mut().zip(other.mean2d) {
            *a += b;
        }
        for (a, b) in self.conic.iter_mut().zip(other.conic) {
            *a += b;
        }
    }
}

fn check_dims(out: &RenderOutput, grad: &ImageBuffer) -> Result<()> {
    if !out.image.same_dims(grad) {
        return Err(Error::mismatch(
            "render_backward grad_image",
            format!("{}x{}", out.image.width, out.image.height),
            format!("{}x{}", grad.width, grad.height),
        ));
    }
    Ok(())
}

/// Rows per accumulation chunk. Depends only on the image height so the
/// reduction order is the same for every thread count.
fn chunk_rows(height: usize) -> usize {
    height.div_ceil(16).max(8)
}

fn backward_splats(out: &RenderOutput, grad: &ImageBuffer, geometry: bool) -> SplatAccum {
    let (w, h) = (out.image.width, out.image.height);
    let n = out.projected.len();
    let rows = chunk_rows(h);
    let chunks: Vec<SplatAccum> = (0..h.div_ceil(rows))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = SplatAccum::zeros(n, geometry);
            for y in chunk * rows..((chunk + 1) * rows).min(h) {
                for x in 0..w {
                    let p = y * w + x;
                    let g = grad.pixel(x, y);
                    let contribs = out.pixel_contributions(p);
                    if !geometry {
                        for c in contribs {
                            acc.color[c.splat as usize] += g * c.weight();
                        }
                        continue;
                    }
                    let pix = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let mut behind = out.background * out.transmittance[p];
                    for c in contribs.iter().rev() {
                        let k = c.splat as usize;
                        let s = &out.projected[k];
                        let wgt = c.weight();
                        acc.color[k] += g * wgt;
                        let d_alpha =
                            c.transmittance * s.color.dot(&g) - behind.dot(&g) / (1.0 - c.alpha);
                        behind += s.color * wgt;
                        if c.clipped {
                            continue;
                        }
                        acc.opacity[k] += c.falloff * d_alpha;
                        let d_power = s.opacity * c.falloff * d_alpha;
                        let d = pix - s.mean2d;
                        acc.conic[k] -= (d * d.transpose()) * (0.5 * d_power);
                        acc.mean2d[k] += (s.conic * d) * d_power;
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = SplatAccum::zeros(n, geometry);
    for c in chunks {
        total.merge(c);
    }
    total
}

/// Gradient of a scalar loss with respect to the rendered colors only.
///
/// `∂pixel/∂c_i` is the compositing weight of splat `i` at that pixel.
pub fn render_backward_colors(out: &RenderOutput, grad: &ImageBuffer) -> Result<Vec<Vector3<f64>>> {
    check_dims(out, grad)?;
    let acc = backward_splats(out, grad, false);
    let mut color = vec![Vector3::zeros(); out.num_gaussians];
    for (k, s) in out.projected.iter().enumerate() {
        color[s.source_index] = acc.color[k];
    }
    Ok(color)
}

/// Full backward pass: colors, opacity and geometry.
pub fn render_backward(
    scene: &GaussianScene,
    cam: &Camera,
    out: &RenderOutput,
    grad: &ImageBuffer,
) -> Result<GaussianGrads> {
    check_dims(out, grad)?;
    if scene.len() != out.num_gaussians {
        return Err(Error::mismatch(
            "render_backward scene",
            out.num_gaussians,
            scene.len(),
        ));
    }
    let acc = backward_splats(out, grad, true);
    let mut grads = GaussianGrads::zeros(scene.len());
    let per_splat: Vec<_> = out
        .projected
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            // Q = M⁻¹  ⇒  dL/dM = -Q dL/dQ Q
            let d_cov = -(s.conic * acc.conic[k] * s.conic);
            project_backward(&scene.gaussians[s.source_index], cam, &acc.mean2d[k], &d_cov)
        })
        .collect();
    for (k, (s, geo)) in out.projected.iter().zip(per_splat).enumerate() {
        let i = s.source_index;
        grads.color[i] = acc.color[k];
        grads.opacity[i] = acc.opacity[k];
        grads.mean[i] = geo.mean;
        grads.scales[i] = geo.scales;
        grads.rotation[i] = geo.rotation;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::super::render;
    use super::*;
    use crate::scene::{ColorSource, Gaussian, IDENTITY_QUAT};
    use nalgebra::Matrix3;

    fn camera() -> Camera {
        Camera {
            width: 12,
            height: 10,
            fx: 14.0,
            fy: 14.0,
            cx: 6.0,
            cy: 5.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    fn scene() -> GaussianScene {
        let mk = |m: [f64; 3], s: f64, o: f64, c: [f64; 3]| {
            Gaussian::new(Vector3::from(m), IDENTITY_QUAT, Vector3::repeat(s), o, Vector3::from(c))
        };
        let mut s = GaussianScene::new(vec![
            mk([0.0, 0.0, 3.0], 0.4, 0.7, [0.9, 0.1, 0.2]),
            mk([0.3, -0.1, 4.0], 0.5, 0.6, [0.1, 0.8, 0.3]),
        ]);
        s.background = Vector3::new(0.1, 0.2, 0.3);
        s
    }

    #[test]
    fn zero_gradient_gives_zero() {
        let (s, cam) = (scene(), camera());
        let out = render(&s, &cam, ColorSource::Gt);
        let zero = ImageBuffer::new(cam.width, cam.height);
        let g = render_backward(&s, &cam, &out, &zero).unwrap();
        assert_eq!(g, GaussianGrads::zeros(2));
    }

    #[test]
    fn color_gradient_is_compositing_weight() {
        let (s, cam) = (scene(), camera());
        let out = render(&s, &cam, ColorSource::Gt);
        let (x, y) = (6, 5);
        let mut grad = ImageBuffer::new(cam.width, cam.height);
        grad.data[(y * cam.width + x) * 3] = 1.0;
        let colors = render_backward_colors(&out, &grad).unwrap();
        let full = render_backward(&s, &cam, &out, &grad).unwrap();
        for c in out.pixel_contributions(y * cam.width + x) {
            let i = out.projected[c.splat as usize].source_index;
            assert_eq!(colors[i].x, c.weight());
            assert_eq!(colors[i].y, 0.0);
            assert_eq!(full.color[i], colors[i]);
        }
    }

    #[test]
    fn mismatched_gradient_rejected() {
        let (s, cam) = (scene(), camera());
        let out = render(&s, &cam, ColorSource::Gt);
        assert!(render_backward_colors(&out, &ImageBuffer::new(3, 3)).is_err());
        assert!(render_backward(&s, &cam, &out, &ImageBuffer::new(3, 3)).is_err());
    }
}
