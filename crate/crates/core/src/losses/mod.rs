//! Style, content and smoothness losses on rendered images, each returning
//! its gradient with respect to its input.

mod nnfm;

pub use nnfm::{
    cosine_distance, nearest_exhaustive, nnfm_from_matches, nnfm_loss, subsample_style, Match,
    StyleIndex, COSINE_EPS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Encoder, FeatureMap, GlobalFeature};
use crate::image::ImageBuffer;
use crate::profile::Profile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_clip: f64,
    pub lambda_nnfm: f64,
    pub lambda_content: f64,
    pub lambda_tv: f64,
}

impl LossWeights {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            lambda_clip: 10.0,
            lambda_nnfm: match profile {
                Profile::Forward => 100.0,
                Profile::Full360 => 10.0,
            },
            lambda_content: 0.05,
            lambda_tv: 1e-4,
        }
    }

    pub fn zero() -> Self {
        Self {
            lambda_clip: 0.0,
            lambda_nnfm: 0.0,
            lambda_content: 0.0,
            lambda_tv: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_clip,
            self.lambda_nnfm,
            self.lambda_content,
            self.lambda_tv,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_profile(Profile::Forward)
    }
}

/// Loss components, their weighted total, and one image gradient per view.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub clip: f64,
    pub nnfm: f64,
    pub content: f64,
    pub tv: f64,
    pub total: f64,
    pub grad_images: Vec<ImageBuffer>,
}

/// `(1/K) Σ_k |g_k - g_s|²` and its gradient with respect to each `g_k`.
pub fn clip_style_loss(
    renders: &[GlobalFeature],
    style: &GlobalFeature,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if renders.is_empty() {
        return Err(Error::InvalidInput("clip_style_loss needs at least one view".into()));
    }
    let k = renders.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(renders.len());
    for g in renders {
        if g.vector.len() != style.vector.len() {
            return Err(Error::mismatch(
                "clip_style_loss descriptor",
                style.vector.len(),
                g.vector.len(),
            ));
        }
        let diff: Vec<f64> = g.vector.iter().zip(&style.vector).map(|(a, b)| a - b).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>();
        grads.push(diff.iter().map(|d| 2.0 * d / k).collect());
    }
    Ok((loss / k, grads))
}

/// Mean squared difference between two feature maps.
pub fn content_loss(fr: &FeatureMap, fgt: &FeatureMap) -> Result<(f64, FeatureMap)> {
    if !fr.same_shape(fgt) {
        return Err(Error::mismatch("content_loss", fgt.shape_string(), fr.shape_string()));
    }
    let n = fr.data.len() as f64;
    let mut grad = FeatureMap::zeros(fr.height, fr.width, fr.channels);
    let mut loss = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&fr.data).zip(&fgt.data) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Anisotropic squared total variation, averaged over neighbor pairs and
/// channels.
pub fn tv_loss(image: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    let (w, h) = (image.width, image.height);
    if w < 2 || h < 2 {
        return Err(Error::InvalidInput(format!(
            "tv_loss needs at least 2x2 pixels, got {w}x{h}"
        )));
    }
    let pairs = (h * (w - 1) + (h - 1) * w) as f64 * 3.0;
    let mut grad = ImageBuffer::new(w, h);
    let mut loss = 0.0;
    let idx = |x: usize, y: usize, c: usize| (y * w + x) * 3 + c;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data[idx(x, y, c)];
                if x + 1 < w {
                    let d = image.data[idx(x + 1, y, c)] - v;
                    loss += d * d;
                    grad.data[idx(x + 1, y, c)] += 2.0 * d / pairs;
                    grad.data[idx(x, y, c)] -= 2.0 * d / pairs;
                }
                if y + 1 < h {
                    let d = image.data[idx(x, y + 1, c)] - v;
                    loss += d * d;
                    grad.data[idx(x, y + 1, c)] += 2.0 * d / pairs;
                    grad.data[idx(x, y, c)] -= 2.0 * d / pairs;
                }
            }
        }
    }
    Ok((loss / pairs, grad))
}

/// Style-side inputs shared by every view.
#[derive(Debug, Clone)]
pub struct StyleTargets {
    pub features: FeatureMap,
    pub global: GlobalFeature,
}

impl StyleTargets {
    /// Encodes the style image; `max_cells` bounds the NNFM search set.
    pub fn from_image(
        encoder: &Encoder,
        style: &ImageBuffer,
        max_cells: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let map = encoder.encode_map(style)?;
        let global = GlobalFeature::from_vector(crate::features::spatial_mean(&map));
        let features = match max_cells {
            Some(m) => subsample_style(&map, m, seed),
            None => map,
        };
        Ok(Self { features, global })
    }

    /// Targets from an externally computed style feature map.
    pub fn from_features(map: FeatureMap) -> Self {
        let global = GlobalFeature::from_vector(crate::features::spatial_mean(&map));
        Self {
            features: map,
            global,
        }
    }
}

/// One rendered view in a loss batch.
pub struct ViewInput<'a> {
    pub render: &'a ImageBuffer,
    /// Encoder features of the view's ground truth, for the content term.
    pub gt_features: &'a FeatureMap,
}

/// Weighted sum of all terms over a batch of `K` views, averaged over `K`,
/// with each view's gradient chained back to its rendered image.
pub fn total_loss(
    encoder: &Encoder,
    views: &[ViewInput<'_>],
    style: &StyleTargets,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if views.is_empty() {
        return Err(Error::InvalidInput("total_loss needs at least one view".into()));
    }
    let k = views.len() as f64;
    let index = StyleIndex::new(&style.features);

    let mut maps = Vec::with_capacity(views.len());
    let mut globals = Vec::with_capacity(views.len());
    for v in views {
        let map = encoder.encode_map(v.render)?;
        globals.push(GlobalFeature::from_vector(crate::features::spatial_mean(&map)));
        maps.push(map);
    }
    let (clip, clip_grads) = clip_style_loss(&globals, &style.global)?;

    let (mut nnfm, mut content, mut tv) = (0.0, 0.0, 0.0);
    let mut grad_images = Vec::with_capacity(views.len());
    for ((v, map), clip_grad) in views.iter().zip(&maps).zip(&clip_grads) {
        let matches = index.nearest_all(map)?;
        let (l_nnfm, g_nnfm) = nnfm_from_matches(map, &style.features, &matches);
        let (l_content, g_content) = content_loss(map, v.gt_features)?;
        let (l_tv, g_tv) = tv_loss(v.render)?;
        nnfm += l_nnfm / k;
        content += l_content / k;
        tv += l_tv / k;

        let scaled: Vec<f64> = clip_grad.iter().map(|g| g * weights.lambda_clip).collect();
        let mut d_map = crate::features::global_to_map_grad(map, &scaled)?;
        for ((d, a), b) in d_map.data.iter_mut().zip(&g_nnfm.data).zip(&g_content.data) {
            *d += weights.lambda_nnfm / k * a + weights.lambda_content / k * b;
        }
        let mut grad = encoder.backprop_map(v.render, &d_map)?;
        for (g, t) in grad.data.iter_mut().zip(&g_tv.data) {
            *g += weights.lambda_tv / k * t;
        }
        grad_images.push(grad);
    }

    let total = weights.lambda_clip * clip
        + weights.lambda_nnfm * nnfm
        + weights.lambda_content * content
        + weights.lambda_tv * tv;
    Ok(LossBreakdown {
        clip,
        nnfm,
        content,
        tv,
        total,
        grad_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::EncoderSpec;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gf(v: &[f64]) -> GlobalFeature {
        GlobalFeature {
            vector: v.to_vec(),
            degenerate: false,
        }
    }

    fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_vec(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn default_weights() {
        let f = LossWeights::for_profile(Profile::Forward);
        assert_eq!(
            (f.lambda_clip, f.lambda_nnfm, f.lambda_content, f.lambda_tv),
            (10.0, 100.0, 0.05, 1e-4)
        );
        assert_eq!(LossWeights::for_profile(Profile::Full360).lambda_nnfm, 10.0);
        assert!(LossWeights { lambda_tv: -1.0, ..f }.validate().is_err());
    }

    #[test]
    fn clip_examples() {
        let s = gf(&[1.0, 0.0]);
        let (l, g) = clip_style_loss(&[s.clone(), s.clone()], &s).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
        // squared distances 0.04 and 0.16
        let (l, _) = clip_style_loss(&[gf(&[1.2, 0.0]), gf(&[1.0, 0.4])], &s).unwrap();
        assert!((l - 0.10).abs() < 1e-15);
        assert!(clip_style_loss(&[], &s).is_err());
        assert!(clip_style_loss(&[gf(&[1.0])], &s).is_err());
    }

    #[test]
    fn content_examples() {
        let a = FeatureMap::from_vec(2, 2, 2, vec![0.3; 8]).unwrap();
        let b = FeatureMap::from_vec(2, 2, 2, vec![1.3; 8]).unwrap();
        assert_eq!(content_loss(&a, &a).unwrap().0, 0.0);
        assert!((content_loss(&b, &a).unwrap().0 - 1.0).abs() < 1e-15);
        let c = FeatureMap::zeros(1, 2, 2);
        assert!(content_loss(&a, &c).is_err());
    }

    #[test]
    fn tv_examples() {
        let flat = ImageBuffer::filled(5, 4, Vector3::new(0.2, 0.5, 0.9));
        assert_eq!(tv_loss(&flat).unwrap().0, 0.0);
        // 2x2 checkerboard on every channel: each of the 4 pairs has diff² = 1
        let mut cb = ImageBuffer::new(2, 2);
        cb.set_pixel(1, 0, &Vector3::repeat(1.0));
        cb.set_pixel(0, 1, &Vector3::repeat(1.0));
        assert_eq!(tv_loss(&cb).unwrap().0, 1.0);
        assert!(tv_loss(&ImageBuffer::new(1, 1)).is_err());
    }

    fn quadratic_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
        let h = 1e-4;
        let mut num = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            num.push((f(&p) - f(&m)) / (2.0 * h));
        }
        let diff: f64 = num.iter().zip(grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        diff / num.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    #[test]
    fn quadratic_gradients_match_fd() {
        let img = random_image(5, 4, 1);
        let (_, g) = tv_loss(&img).unwrap();
        let err = quadratic_fd(
            |x| tv_loss(&ImageBuffer::from_vec(5, 4, x.to_vec()).unwrap()).unwrap().0,
            &img.data,
            &g.data,
        );
        assert!(err < 1e-6, "tv {err}");

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = FeatureMap::from_vec(2, 3, 4, (0..24).map(|_| rng.random()).collect()).unwrap();
        let b = FeatureMap::from_vec(2, 3, 4, (0..24).map(|_| rng.random()).collect()).unwrap();
        let (_, g) = content_loss(&a, &b).unwrap();
        let err = quadratic_fd(
            |x| content_loss(&FeatureMap::from_vec(2, 3, 4, x.to_vec()).unwrap(), &b).unwrap().0,
            &a.data,
            &g.data,
        );
        assert!(err < 1e-6, "content {err}");

        let s = gf(&[0.3, -0.2, 0.9]);
        let x = vec![0.5, 0.1, -0.4];
        let (_, g) = clip_style_loss(&[gf(&x)], &s).unwrap();
        let err = quadratic_fd(|x| clip_style_loss(&[gf(x)], &s).unwrap().0, &x, &g[0]);
        assert!(err < 1e-6, "clip {err}");
    }

    #[test]
    fn zero_weights_zero_total() {
        let enc = Encoder::new(&EncoderSpec::default()).unwrap();
        let render = random_image(16, 16, 3);
        let gt = enc.encode_map(&random_image(16, 16, 4)).unwrap();
        let style = StyleTargets::from_image(&enc, &random_image(24, 24, 5), None, 0).unwrap();
        let out = total_loss(
            &enc,
            &[ViewInput {
                render: &render,
                gt_features: &gt,
            }],
            &style,
            &LossWeights::zero(),
        )
        .unwrap();
        assert_eq!(out.total, 0.0);
        assert!(out.grad_images[0].data.iter().all(|&v| v == 0.0));
        assert!(out.nnfm > 0.0 && out.content > 0.0 && out.tv > 0.0);
    }

    #[test]
    fn total_is_weighted_sum_of_components() {
        let enc = Encoder::new(&EncoderSpec::default()).unwrap();
        let renders = [random_image(16, 16, 6), random_image(16, 16, 7)];
        let gts: Vec<_> = [8, 9]
            .iter()
            .map(|&s| enc.encode_map(&random_image(16, 16, s)).unwrap())
            .collect();
        let style = StyleTargets::from_image(&enc, &random_image(32, 24, 10), None, 0).unwrap();
        let w = LossWeights::default();
        let views: Vec<_> = renders
            .iter()
            .zip(&gts)
            .map(|(r, g)| ViewInput {
                render: r,
                gt_features: g,
            })
            .collect();
        let out = total_loss(&enc, &views, &style, &w).unwrap();
        let manual = w.lambda_clip * out.clip
            + w.lambda_nnfm * out.nnfm
            + w.lambda_content * out.content
            + w.lambda_tv * out.tv;
        assert!((out.total - manual).abs() <= 1e-9);
        assert_eq!(out.grad_images.len(), 2);
    }
}
