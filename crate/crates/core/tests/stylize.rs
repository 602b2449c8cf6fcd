use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gstyle_core::features::{Encoder, EncoderSpec};
use gstyle_core::fine_tune::{geometry_refit, refit_loss, RefitConfig, StylizeConfig, Stylizer};
use gstyle_core::image::psnr;
use gstyle_core::losses::{LossWeights, StyleTargets};
use gstyle_core::preprocess::SplitMode;
use gstyle_core::render::render;
use gstyle_core::scene::{ColorSource, GaussianScene};
use gstyle_core::scene_io::View;
use gstyle_core::synthetic::{synthetic_case, SyntheticCase, SyntheticSpec};

fn case(n: usize, seed: u64) -> SyntheticCase {
    let spec = SyntheticSpec {
        num_gaussians: n,
        num_views: 3,
        width: 32,
        height: 32,
        seed,
        ..Default::default()
    };
    synthetic_case(&spec, 1.0).unwrap()
}

fn stylizer(cfg: StylizeConfig, weights: LossWeights, c: &SyntheticCase, scene: &GaussianScene) -> Stylizer {
    let encoder = Encoder::new(&EncoderSpec::default()).unwrap();
    let style = StyleTargets::from_image(&encoder, &c.dataset.style, None, 0).unwrap();
    Stylizer::new(cfg, weights, encoder, style, &c.dataset.views, scene, SplitMode::Deterministic).unwrap()
}

fn no_splits(epochs: usize) -> StylizeConfig {
    StylizeConfig {
        epochs,
        split_percent: 0.0,
        refit_steps: 0,
        ..Default::default()
    }
}

#[test]
fn zero_weights_leave_colors_untouched() {
    let c = case(40, 1);
    let mut scene = c.input.clone();
    let mut st = stylizer(no_splits(2), LossWeights::zero(), &c, &scene);
    let before = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for e in 1..=2 {
        let s = st.run_epoch(e, &mut scene, &c.dataset.views, &mut rng, &mut |_| Ok(())).unwrap();
        assert_eq!(s.mean_total, 0.0);
        assert!(s.splits.is_empty());
    }
    assert_eq!(scene, before);
}

#[test]
fn content_only_descends() {
    let c = case(60, 2);
    let mut scene = c.input.clone();
    for g in &mut scene.gaussians {
        g.color_style = g.color_gt.map(|v| 1.0 - v);
    }
    let weights = LossWeights {
        lambda_content: 1.0,
        ..LossWeights::zero()
    };
    let cfg = StylizeConfig {
        lr_start: Some(2e-2),
        lr_end: Some(2e-2),
        ..no_splits(12)
    };
    let mut st = stylizer(cfg, weights, &c, &scene);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut means = Vec::new();
    for e in 1..=12 {
        means.push(st.run_epoch(e, &mut scene, &c.dataset.views, &mut rng, &mut |_| Ok(())).unwrap().mean_total);
    }
    assert!(means[11] < 0.5 * means[0], "{means:?}");
    for g in &scene.gaussians {
        assert!(g.color_style.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn stylization_changes_only_style_colors_between_splits() {
    let c = case(40, 3);
    let mut scene = c.input.clone();
    let mut st = stylizer(no_splits(1), LossWeights::default(), &c, &scene);
    let before = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    st.run_epoch(1, &mut scene, &c.dataset.views, &mut rng, &mut |_| Ok(())).unwrap();
    let mut changed = 0;
    for (a, b) in scene.gaussians.iter().zip(&before.gaussians) {
        assert_eq!((a.mean, a.scales, a.rotation, a.opacity, a.color_gt), (b.mean, b.scales, b.rotation, b.opacity, b.color_gt));
        changed += usize::from(a.color_style != b.color_style);
    }
    assert!(changed > 0);
}

#[test]
fn split_epoch_grows_scene_and_keeps_fidelity() {
    let c = case(100, 4);
    let mut scene = c.input.clone();
    let cfg = StylizeConfig {
        split_percent: 0.05,
        refit_steps: 20,
        ..no_splits(1)
    };
    let mut st = stylizer(cfg, LossWeights::default(), &c, &scene);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = st.run_epoch(1, &mut scene, &c.dataset.views, &mut rng, &mut |_| Ok(())).unwrap();
    assert_eq!(s.splits.len(), 1);
    assert_eq!(s.splits[0].parents.len(), 5);
    assert_eq!(scene.len(), 105);
    assert_eq!(st.buffer.len(), 105);
    assert!(st.buffer.values[100..].iter().all(|v| *v == 0.0));
    for &p in &s.splits[0].parents {
        assert_eq!(st.buffer.values[p], 0.0);
    }
    scene.validate().unwrap();
    let r = &s.splits[0].refit;
    assert!(r.final_loss <= r.initial_loss + 1e-12, "{r:?}");
}

fn mean_psnr(scene: &GaussianScene, views: &[View]) -> f64 {
    views
        .iter()
        .map(|v| psnr(&render(scene, &v.camera, ColorSource::Gt).image, &v.image).unwrap())
        .sum::<f64>()
        / views.len() as f64
}

#[test]
fn refit_recovers_perturbed_scene() {
    let c = case(80, 5);
    let mut scene = c.input.clone();
    let before = refit_loss(&scene, &c.dataset.views, 0.2).unwrap();
    let p0 = mean_psnr(&scene, &c.dataset.views);
    let report = geometry_refit(&mut scene, &c.dataset.views, &RefitConfig::with_steps(150)).unwrap();
    let after = refit_loss(&scene, &c.dataset.views, 0.2).unwrap();
    let p1 = mean_psnr(&scene, &c.dataset.views);
    assert!(after < 0.7 * before, "{before} → {after}");
    assert!(p1 > p0 + 1.0, "{p0} → {p1}");
    assert_eq!(report.final_loss, after);
    scene.validate().unwrap();
}
