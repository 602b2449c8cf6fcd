use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureMap, GlobalFeature};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Shape and seed of the built-in encoder. Identical specs build
/// bit-identical filter banks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    /// Output channels of each conv → ReLU → pool block.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            seed: 0x5eed_f00d,
        }
    }
}

/// One 3×3 convolution bank, weights laid out `[ky][kx][c_in][c_out]`.
#[derive(Debug, Clone, PartialEq)]
struct ConvBank {
    c_in: usize,
    c_out: usize,
    weights: Vec<f64>,
}

impl ConvBank {
    /// Rows of a Gaussian matrix, Gram-Schmidt orthonormalized, times √2.
    fn seeded(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = 9 * c_in;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c_out);
        for _ in 0..c_out {
            let mut v: Vec<f64> = (0..fan_in).map(|_| StandardNormal.sample(rng)).collect();
            // only orthogonalize while the rows can still be independent
            if rows.len() < fan_in {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
            rows.push(v);
        }
        let gain = std::f64::consts::SQRT_2;
        let mut weights = vec![0.0; fan_in * c_out];
        for (o, row) in rows.iter().enumerate() {
            // row index = (ky * 3 + kx) * c_in + ci
            for (k, &val) in row.iter().enumerate() {
                weights[k * c_out + o] = gain * val;
            }
        }
        Self {
            c_in,
            c_out,
            weights,
        }
    }

    #[inline]
    fn tap(&self, ky: usize, kx: usize, ci: usize) -> &[f64] {
        let base = ((ky * 3 + kx) * self.c_in + ci) * self.c_out;
        &self.weights[base..base + self.c_out]
    }

    /// Zero-padded same-size convolution of an `h × w × c_in` input.
    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w * self.c_out];
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(y * w + x) * self.c_out..(y * w + x + 1) * self.c_out];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (sy as usize * w + sx as usize) * self.c_in;
                        for ci in 0..self.c_in {
                            let v = input[src + ci];
                            if v == 0.0 {
                                continue;
                            }
                            for (acc, wt) in o.iter_mut().zip(self.tap(ky, kx, ci)) {
                                *acc += v * wt;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ConvBank::forward`].
    fn backward(&self, d_out: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut d_in = vec![0.0; h * w * self.c_in];
        for y in 0..h {
            for x in 0..w {
                let g = &d_out[(y * w + x) * self.c_out..(y * w + x + 1) * self.c_out];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = (sy as usize * w + sx as usize) * self.c_in;
                        for ci in 0..self.c_in {
                            let dot: f64 = g.iter().zip(self.tap(ky, kx, ci)).map(|(a, b)| a * b).sum();
                            d_in[dst + ci] += dot;
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Forward activations kept for the backward pass.
struct BlockCache {
    h: usize,
    w: usize,
    /// Pre-activation conv output (`h × w × c_out`).
    pre: Vec<f64>,
}

/// The built-in deterministic multi-scale encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    banks: Vec<ConvBank>,
}

fn avg_pool(input: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            let o = (y * ow + x) * c;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * y + dy) * w + 2 * x + dx) * c;
                for k in 0..c {
                    out[o + k] += 0.25 * input[s + k];
                }
            }
        }
    }
    out
}

fn avg_pool_backward(d_out: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut d_in = vec![0.0; h * w * c];
    for y in 0..oh {
        for x in 0..ow {
            let o = (y * ow + x) * c;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * y + dy) * w + 2 * x + dx) * c;
                for k in 0..c {
                    d_in[s + k] = 0.25 * d_out[o + k];
                }
            }
        }
    }
    d_in
}

impl Encoder {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        if spec.channels.is_empty() || spec.channels.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "encoder needs at least one block with nonzero width, got {:?}",
                spec.channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut c_in = 3;
        let banks = spec
            .channels
            .iter()
            .map(|&c_out| {
                let bank = ConvBank::seeded(c_in, c_out, &mut rng);
                c_in = c_out;
                bank
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            banks,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn out_channels(&self) -> usize {
        *self.spec.channels.last().unwrap()
    }

    /// Smallest accepted input side length.
    pub fn min_input_size(&self) -> usize {
        1 << self.banks.len()
    }

    /// Output grid size for an input of `height × width`.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let shift = self.banks.len();
        (height >> shift, width >> shift)
    }

    fn check_input(&self, image: &ImageBuffer) -> Result<()> {
        let min = self.min_input_size();
        if image.width < min || image.height < min {
            return Err(Error::InvalidInput(format!(
                "image {}x{} is smaller than the encoder's {min}x{min} minimum",
                image.width, image.height
            )));
        }
        Ok(())
    }

    fn forward(&self, image: &ImageBuffer) -> Result<(FeatureMap, Vec<BlockCache>)> {
        self.check_input(image)?;
        let (mut h, mut w) = (image.height, image.width);
        let mut x = image.data.clone();
        let mut caches = Vec::with_capacity(self.banks.len());
        for bank in &self.banks {
            let pre = bank.forward(&x, h, w);
            let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            x = avg_pool(&act, h, w, bank.c_out);
            caches.push(BlockCache { h, w, pre });
            h /= 2;
            w /= 2;
        }
        Ok((FeatureMap::from_vec(h, w, self.out_channels(), x)?, caches))
    }

    /// Top-block feature map, `⌊H/8⌋ × ⌊W/8⌋ × C` for the default three blocks.
    pub fn encode_map(&self, image: &ImageBuffer) -> Result<FeatureMap> {
        Ok(self.forward(image)?.0)
    }

    /// Spatial mean of the top-block map, normalized to unit length.
    pub fn encode_global(&self, image: &ImageBuffer) -> Result<GlobalFeature> {
        let map = self.encode_map(image)?;
        Ok(GlobalFeature::from_vector(spatial_mean(&map)))
    }

    /// Vector-Jacobian product of [`Encoder::encode_map`] at `image`.
    pub fn backprop_map(&self, image: &ImageBuffer, grad: &FeatureMap) -> Result<ImageBuffer> {
        let (map, caches) = self.forward(image)?;
        if !map.same_shape(grad) {
            return Err(Error::mismatch(
                "backprop_map feature gradient",
                map.shape_string(),
                grad.shape_string(),
            ));
        }
        let mut d = grad.data.clone();
        for (bank, cache) in self.banks.iter().zip(&caches).rev() {
            let mut d_act = avg_pool_backward(&d, cache.h, cache.w, bank.c_out);
            for (g, &z) in d_act.iter_mut().zip(&cache.pre) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            d = bank.backward(&d_act, cache.h, cache.w);
        }
        ImageBuffer::from_vec(image.width, image.height, d)
    }

    /// Gradient with respect to the image of `⟨grad, encode_global(image)⟩`.
    /// Degenerate (zero) descriptors propagate no gradient.
    pub fn backprop_global(&self, image: &ImageBuffer, grad: &[f64]) -> Result<ImageBuffer> {
        let map = self.encode_map(image)?;
        let d_map = global_to_map_grad(&map, grad)?;
        self.backprop_map(image, &d_map)
    }
}

pub fn spatial_mean(map: &FeatureMap) -> Vec<f64> {
    let mut m = vec![0.0; map.channels];
    for cell in map.cells() {
        m.iter_mut().zip(cell).for_each(|(a, b)| *a += b);
    }
    let n = map.num_cells() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Pulls a descriptor-space gradient back onto the feature map through the
/// mean pool and the normalization.
pub fn global_to_map_grad(map: &FeatureMap, grad: &[f64]) -> Result<FeatureMap> {
    if grad.len() != map.channels {
        return Err(Error::mismatch("global feature gradient", map.channels, grad.len()));
    }
    let m = spatial_mean(map);
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = FeatureMap::zeros(map.height, map.width, map.channels);
    if norm == 0.0 {
        return Ok(out);
    }
    // d(m/|m|) = (I - ĝĝᵀ) dm / |m|
    let dot: f64 = m.iter().zip(grad).map(|(a, b)| a * b).sum::<f64>() / norm;
    let n = map.num_cells() as f64;
    let dm: Vec<f64> = m
        .iter()
        .zip(grad)
        .map(|(mi, gi)| (gi - mi / norm * dot) / norm / n)
        .collect();
    for cell in out.data.chunks_exact_mut(map.channels) {
        cell.copy_from_slice(&dm);
    }
    Ok(out)
}
