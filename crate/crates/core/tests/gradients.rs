use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gstyle_core::camera::Camera;
use gstyle_core::features::{Encoder, EncoderSpec};
use gstyle_core::fine_tune::{refit_loss, refit_objective};
use gstyle_core::gradcheck::{rel_err, stable_difference};
use gstyle_core::image::ImageBuffer;
use gstyle_core::losses::{total_loss, LossWeights, StyleTargets, ViewInput};
use gstyle_core::render::{render, render_backward, render_backward_colors};
use gstyle_core::scene::{normalize_quat, ColorSource, Gaussian, GaussianScene};
use gstyle_core::scene_io::View;

fn scene(seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = (0..5)
        .map(|_| {
            let mean = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3));
            let q = normalize_quat(&[1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]).unwrap();
            let scales = Vector3::new(rng.random_range(0.15..0.4), rng.random_range(0.15..0.4), rng.random_range(0.15..0.4));
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            Gaussian::new(mean, q, scales, rng.random_range(0.3..0.8), color)
        })
        .collect();
    let mut s = GaussianScene::new(gs);
    s.background = Vector3::new(0.1, 0.15, 0.2);
    s
}

fn camera(angle: f64) -> Camera {
    let eye = Vector3::new(angle.sin(), 0.0, -angle.cos()) * 3.0;
    Camera::look_at(32, 32, 32.0, eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0))
}

fn random_image(seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_vec(32, 32, (0..32 * 32 * 3).map(|_| rng.random()).collect()).unwrap()
}

/// Checks every raw parameter of every Gaussian against central differences.
fn check_all(f: &dyn Fn(&GaussianScene) -> f64, s: &GaussianScene, g: &gstyle_core::render::GaussianGrads, tol: f64) {
    for i in 0..s.len() {
        let mut fd = Vec::new();
        for k in 0..3 {
            fd.push(stable_difference(f, s, &|sc, h| sc.gaussians[i].mean[k] += h));
        }
        assert!(rel_err(g.mean[i].as_slice(), &fd, 1e-6) < tol, "mean {i}: {:?} vs {fd:?}", g.mean[i]);
        fd.clear();
        for k in 0..3 {
            fd.push(stable_difference(f, s, &|sc, h| sc.gaussians[i].scales[k] += h));
        }
        assert!(rel_err(g.scales[i].as_slice(), &fd, 1e-6) < tol, "scales {i}: {:?} vs {fd:?}", g.scales[i]);
        fd.clear();
        for k in 0..4 {
            fd.push(stable_difference(f, s, &|sc, h| sc.gaussians[i].rotation[k] += h));
        }
        assert!(rel_err(&g.rotation[i], &fd, 1e-6) < tol, "rotation {i}: {:?} vs {fd:?}", g.rotation[i]);
        let fd_o = stable_difference(f, s, &|sc, h| sc.gaussians[i].opacity += h);
        assert!(rel_err(&[g.opacity[i]], &[fd_o], 1e-6) < tol, "opacity {i}: {} vs {fd_o}", g.opacity[i]);
        fd.clear();
        for k in 0..3 {
            fd.push(stable_difference(f, s, &|sc, h| sc.gaussians[i].color_gt[k] += h));
        }
        assert!(rel_err(g.color[i].as_slice(), &fd, 1e-6) < tol, "color {i}: {:?} vs {fd:?}", g.color[i]);
    }
}

#[test]
fn render_backward_matches_finite_differences() {
    let s = scene(11);
    let cam = camera(0.3);
    let w = random_image(4);
    let f = |sc: &GaussianScene| -> f64 {
        let img = render(sc, &cam, ColorSource::Gt).image;
        img.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    };
    let out = render(&s, &cam, ColorSource::Gt);
    assert_eq!(out.diagnostics.visible, 5);
    let g = render_backward(&s, &cam, &out, &w).unwrap();
    check_all(&f, &s, &g, 1e-3);
}

#[test]
fn refit_objective_matches_finite_differences() {
    let truth = scene(21);
    let views: Vec<View> = [-0.4, 0.0, 0.4]
        .iter()
        .enumerate()
        .map(|(k, a)| View {
            name: format!("v{k}.png"),
            camera: camera(*a),
            image: render(&truth, &camera(*a), ColorSource::Gt).image,
        })
        .collect();
    let mut s = truth.clone();
    for g in &mut s.gaussians {
        g.mean += Vector3::new(0.05, -0.03, 0.02);
        g.scales *= 1.1;
        g.color_gt = g.color_gt.map(|c| 0.8 * c + 0.1);
    }
    let (_, grads) = refit_objective(&s, &views, 0.2).unwrap();
    check_all(&|sc| refit_loss(sc, &views, 0.2).unwrap(), &s, &grads, 1e-3);
}

#[test]
fn total_loss_gradient_wrt_style_colors() {
    let s = scene(31);
    let cam = camera(0.1);
    let encoder = Encoder::new(&EncoderSpec::default()).unwrap();
    let gt = render(&s, &cam, ColorSource::Gt).image;
    let gt_features = encoder.encode_map(&gt).unwrap();
    let style = StyleTargets::from_image(&encoder, &random_image(9), None, 0).unwrap();
    let mut start = s.clone();
    for g in &mut start.gaussians {
        g.color_style = g.color_gt.map(|c| 0.6 * c + 0.2);
    }
    let weights = LossWeights::default();
    let loss = |sc: &GaussianScene| -> f64 {
        let r = render(sc, &cam, ColorSource::Style).image;
        let v = [ViewInput { render: &r, gt_features: &gt_features }];
        total_loss(&encoder, &v, &style, &weights).unwrap().total
    };
    let out = render(&start, &cam, ColorSource::Style);
    let v = [ViewInput { render: &out.image, gt_features: &gt_features }];
    let b = total_loss(&encoder, &v, &style, &weights).unwrap();
    let g = render_backward_colors(&out, &b.grad_images[0]).unwrap();
    for i in 0..start.len() {
        let fd: Vec<f64> = (0..3)
            .map(|k| stable_difference(&loss, &start, &|sc, h| sc.gaussians[i].color_style[k] += h))
            .collect();
        assert!(rel_err(g[i].as_slice(), &fd, 1e-6) < 1e-3, "color_style {i}: {:?} vs {fd:?}", g[i]);
    }
}
