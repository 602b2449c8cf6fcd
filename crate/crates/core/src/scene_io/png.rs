//! 8-bit (and 16-bit) PNG to linear `[0, 1]` floats with a plain `/255` map.

use std::path::Path;

use image::{DynamicImage, RgbImage};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

pub fn from_dynamic(img: DynamicImage) -> ImageBuffer {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        _ => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };
    ImageBuffer { width: w, height: h, data }
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| image_err(path, e))?;
    Ok(from_dynamic(img))
}

/// Rounds to the nearest 8-bit level after clamping to `[0, 1]`.
pub fn quantize(image: &ImageBuffer) -> Vec<u8> {
    image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn save_png(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rgb = RgbImage::from_raw(image.width as u32, image.height as u32, quantize(image))
        .ok_or_else(|| image_err(path, "buffer size does not match dimensions"))?;
    rgb.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_scale_maps_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        RgbImage::from_raw(1, 1, vec![255, 0, 128]).unwrap().save(&path).unwrap();
        let img = load_png(&path).unwrap();
        assert_eq!(img.data, vec![1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_png(dir.path().join("none.png")), Err(Error::Io { .. })));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        assert!(matches!(load_png(&bad), Err(Error::Image { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn eight_bit_round_trip_is_exact(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let bytes: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = ImageBuffer::from_vec(w, h, bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.png");
            save_png(&img, &path).unwrap();
            let back = load_png(&path).unwrap();
            prop_assert_eq!(quantize(&back), bytes);
            prop_assert_eq!(back, img);
        }
    }
}
