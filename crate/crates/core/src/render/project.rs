//! EWA projection of 3D Gaussians to screen-space splats, and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::Camera;
use crate::scene::{quat_norm, rotation_matrix, Gaussian, Quat};

/// Camera-space depth at or below which a Gaussian is culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic screen-space dilation added to every projected covariance (px²).
pub const LOW_PASS: f64 = 0.3;
/// Projected covariances above this condition number are skipped.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub source_index: usize,
    /// 3σ radius along the major axis, in pixels.
    pub radius: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Visible,
    Culled,
    Degenerate,
}

/// Rotation of a possibly unnormalized quaternion, after normalization.
pub(crate) fn unit_rotation(q: &Quat) -> Matrix3<f64> {
    let n = quat_norm(q);
    rotation_matrix(&[q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

fn world_covariance(g: &Gaussian) -> Matrix3<f64> {
    let r = unit_rotation(&g.rotation);
    let d = Matrix3::from_diagonal(&g.scales.component_mul(&g.scales));
    r * d * r.transpose()
}

/// Screen-space mean, 2×2 covariance (with low-pass) and camera-space mean.
///
/// Returns `None` when the mean is at or behind the near plane.
pub fn project_moments(
    g: &Gaussian,
    cam: &Camera,
) -> Option<(Vector2<f64>, Matrix2<f64>, Vector3<f64>)> {
    let t = cam.to_camera(&g.mean);
    if !(t.z > NEAR_PLANE) || !t.iter().all(|v| v.is_finite()) {
        return None;
    }
    let jw = projection_jacobian(cam, &t) * cam.rotation;
    let cov = jw * world_covariance(g) * jw.transpose() + Matrix2::identity() * LOW_PASS;
    Some((cam.project(&t), cov, t))
}

pub fn project_gaussian(
    g: &Gaussian,
    index: usize,
    cam: &Camera,
    color: Vector3<f64>,
) -> (Projection, Option<ProjectedGaussian>) {
    let Some((mean2d, cov2d, t)) = project_moments(g, cam) else {
        return (Projection::Culled, None);
    };
    // Symmetric 2×2 eigenvalues.
    let half_tr = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let det = cov2d.determinant();
    let disc = (half_tr * half_tr - det).max(0.0).sqrt();
    let (l_max, l_min) = (half_tr + disc, half_tr - disc);
    if !(det > 0.0) || !(l_min > 0.0) || !l_max.is_finite() || l_max / l_min > MAX_CONDITION {
        return (Projection::Degenerate, None);
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    (
        Projection::Visible,
        Some(ProjectedGaussian {
            mean2d,
            cov2d,
            conic,
            depth: t.z,
            source_index: index,
            radius: 3.0 * l_max.sqrt(),
            opacity: g.opacity,
            color,
        }),
    )
}

/// Gradients of one Gaussian's geometry parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeometryGrad {
    pub mean: Vector3<f64>,
    pub scales: Vector3<f64>,
    /// With respect to the stored (unnormalized) quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
}

/// `dR/d(w,x,y,z)` for the unit-quaternion rotation matrix.
fn rotation_partials(q: &Quat) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    [
        Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Matrix3::new(
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        ),
        Matrix3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        ),
        Matrix3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        ),
    ]
}

/// Chain rule from screen-space mean and covariance gradients back to the
/// world-space mean, scales and quaternion.
///
/// `d_cov2d` is the gradient with respect to each entry of the full 2×2
/// matrix (no symmetrization assumed).
pub fn project_backward(
    g: &Gaussian,
    cam: &Camera,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> GeometryGrad {
    let t = cam.to_camera(&g.mean);
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    let j = projection_jacobian(cam, &t);
    let jw = j * cam.rotation;

    let n = quat_norm(&g.rotation);
    let qn = [
        g.rotation[0] / n,
        g.rotation[1] / n,
        g.rotation[2] / n,
        g.rotation[3] / n,
    ];
    let r = rotation_matrix(&qn);
    let s2 = g.scales.component_mul(&g.scales);
    let d = Matrix3::from_diagonal(&s2);
    let sigma = r * d * r.transpose();

    // cov2d = T Σ Tᵀ with T = J W
    let d_sigma = jw.transpose() * d_cov2d * jw;
    let d_jw = (d_cov2d + d_cov2d.transpose()) * jw * sigma;
    let d_j = d_jw * cam.rotation.transpose();

    let mut d_t = Vector3::new(
        d_mean2d.x * fx * iz,
        d_mean2d.y * fy * iz,
        -d_mean2d.x * fx * t.x * iz2 - d_mean2d.y * fy * t.y * iz2,
    );
    d_t.x += d_j[(0, 2)] * (-fx * iz2);
    d_t.y += d_j[(1, 2)] * (-fy * iz2);
    d_t.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    let mean = cam.rotation.transpose() * d_t;

    // Σ = R D Rᵀ
    let rt_ds_r = r.transpose() * d_sigma * r;
    let scales = Vector3::new(
        rt_ds_r[(0, 0)] * 2.0 * g.scales.x,
        rt_ds_r[(1, 1)] * 2.0 * g.scales.y,
        rt_ds_r[(2, 2)] * 2.0 * g.scales.z,
    );
    let d_r = (d_sigma + d_sigma.transpose()) * r * d;
    let partials = rotation_partials(&qn);
    let mut d_qn = [0.0; 4];
    for k in 0..4 {
        d_qn[k] = d_r.component_mul(&partials[k]).sum();
    }
    // through q̂ = q / |q|
    let dot: f64 = (0..4).map(|k| d_qn[k] * qn[k]).sum();
    let mut rotation = [0.0; 4];
    for k in 0..4 {
        rotation[k] = (d_qn[k] - qn[k] * dot) / n;
    }

    GeometryGrad {
        mean,
        scales,
        rotation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::IDENTITY_QUAT;
    use approx::assert_relative_eq;

    fn axis_camera(f: f64) -> Camera {
        Camera {
            width: 64,
            height: 64,
            fx: f,
            fy: f,
            cx: 32.0,
            cy: 32.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    fn unit_at(z: f64) -> Gaussian {
        Gaussian::new(
            Vector3::new(0.0, 0.0, z),
            IDENTITY_QUAT,
            Vector3::repeat(1.0),
            1.0,
            Vector3::repeat(0.5),
        )
    }

    #[test]
    fn on_axis_point_projects_to_principal_point() {
        let cam = axis_camera(50.0);
        let (_, p) = project_gaussian(&unit_at(50.0), 0, &cam, Vector3::zeros());
        let p = p.unwrap();
        assert_relative_eq!(p.mean2d, Vector2::new(32.0, 32.0), epsilon = 1e-12);
    }

    #[test]
    fn isotropic_covariance_scales_with_focal_over_depth() {
        let (f, z) = (40.0, 5.0);
        let (_, p) = project_gaussian(&unit_at(z), 0, &axis_camera(f), Vector3::zeros());
        let expect = Matrix2::identity() * ((f / z).powi(2) + 0.3);
        assert_relative_eq!(p.unwrap().cov2d, expect, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let (status, p) = project_gaussian(&unit_at(-1.0), 0, &axis_camera(10.0), Vector3::zeros());
        assert_eq!(status, Projection::Culled);
        assert!(p.is_none());
        let (status, _) = project_gaussian(&unit_at(0.01), 0, &axis_camera(10.0), Vector3::zeros());
        assert_eq!(status, Projection::Culled);
    }

    #[test]
    fn project_backward_matches_finite_differences() {
        let cam = Camera::look_at(
            48,
            40,
            45.0,
            Vector3::new(0.7, -0.4, -4.0),
            Vector3::new(0.1, 0.1, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        );
        let g = Gaussian::new(
            Vector3::new(0.3, -0.2, 0.4),
            [0.9, 0.3, -0.2, 0.25],
            Vector3::new(0.4, 0.15, 0.25),
            0.7,
            Vector3::zeros(),
        );
        // scalar objective: <A, cov2d> + <b, mean2d>
        let a = Matrix2::new(0.7, -0.3, 0.2, 1.1);
        let b = Vector2::new(-0.4, 0.9);
        let objective = |g: &Gaussian| {
            let (m, c, _) = project_moments(g, &cam).unwrap();
            a.component_mul(&c).sum() + b.dot(&m)
        };
        let grad = project_backward(&g, &cam, &b, &a);
        let h = 1e-6;
        let fd = |mutate: &dyn Fn(&mut Gaussian, f64)| {
            let mut gp = g.clone();
            mutate(&mut gp, h);
            let mut gm = g.clone();
            mutate(&mut gm, -h);
            (objective(&gp) - objective(&gm)) / (2.0 * h)
        };
        for k in 0..3 {
            let m = fd(&|g: &mut Gaussian, e| g.mean[k] += e);
            assert_relative_eq!(grad.mean[k], m, max_relative = 1e-6, epsilon = 1e-7);
            let s = fd(&|g: &mut Gaussian, e| g.scales[k] += e);
            assert_relative_eq!(grad.scales[k], s, max_relative = 1e-6, epsilon = 1e-7);
        }
        for k in 0..4 {
            let q = fd(&|g: &mut Gaussian, e| g.rotation[k] += e);
            assert_relative_eq!(grad.rotation[k], q, max_relative = 1e-6, epsilon = 1e-7);
        }
    }
}
