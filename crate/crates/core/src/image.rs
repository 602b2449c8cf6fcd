//! Floating-point RGB image stored row-major, channel-interleaved.

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, color: Vector3<f64>) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(color.as_slice());
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::mismatch("image buffer", width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = (y * self.width + x) * 3;
        Vector3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: &Vector3<f64>) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(c.as_slice());
    }

    pub fn pixels(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.data
            .chunks_exact(3)
            .map(|p| Vector3::new(p[0], p[1], p[2]))
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map_pixels(&self, mut f: impl FnMut(Vector3<f64>) -> Vector3<f64>) -> ImageBuffer {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(3) {
            let v = f(Vector3::new(px[0], px[1], px[2]));
            px.copy_from_slice(v.as_slice());
        }
        out
    }
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::mismatch(
            "mse",
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let n = a.data.len() as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio for unit-range images. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_known_offset() {
        let a = ImageBuffer::filled(4, 4, Vector3::repeat(0.5));
        let b = ImageBuffer::filled(4, 4, Vector3::repeat(0.6));
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &ImageBuffer::new(3, 4)).is_err());
    }

    #[test]
    fn pixel_accessors() {
        let mut img = ImageBuffer::new(3, 2);
        img.set_pixel(2, 1, &Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(img.pixel(2, 1), Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(img.data[15..18], [0.1, 0.2, 0.3]);
    }
}
