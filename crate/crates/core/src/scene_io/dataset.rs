//! Camera datasets: `cameras.json` plus one PNG per camera, and `style.png`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::png::{load_png, save_png};
use crate::camera::{Camera, CameraRecord};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const CAMERAS_FILE: &str = "cameras.json";
pub const STYLE_FILE: &str = "style.png";

/// One posed ground-truth image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    /// Image file name as listed in `cameras.json`.
    pub name: String,
    pub camera: Camera,
    pub image: ImageBuffer,
}

impl View {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.image.width != self.camera.width || self.image.height != self.camera.height {
            return Err(Error::Dataset(format!(
                "{}: camera declares {}x{}, image is {}x{}",
                self.name, self.camera.width, self.camera.height, self.image.width, self.image.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub views: Vec<View>,
    pub style: ImageBuffer,
}

impl Dataset {
    pub fn new(views: Vec<View>, style: ImageBuffer) -> Result<Self> {
        validate_views(&views)?;
        if style.width == 0 || style.height == 0 {
            return Err(Error::Dataset("style image is empty".into()));
        }
        Ok(Self { views, style })
    }

    pub fn gt_images(&self) -> impl Iterator<Item = &ImageBuffer> {
        self.views.iter().map(|v| &v.image)
    }
}

pub fn validate_views(views: &[View]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::Dataset("camera list is empty".into()));
    }
    views.iter().try_for_each(View::validate)
}

pub fn read_camera_records(dir: &Path) -> Result<Vec<CameraRecord>> {
    let path = dir.join(CAMERAS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Loads cameras and ground-truth images, without the style image.
pub fn load_views(dir: impl AsRef<Path>) -> Result<Vec<View>> {
    let dir = dir.as_ref();
    let records = read_camera_records(dir)?;
    if records.is_empty() {
        return Err(Error::Dataset(format!("{}: camera list is empty", dir.join(CAMERAS_FILE).display())));
    }
    let views: Vec<View> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let camera = rec.to_camera().map_err(|e| Error::Dataset(format!("camera {i}: {e}")))?;
            let path = dir.join(&rec.image);
            if !path.is_file() {
                return Err(Error::Dataset(format!("camera {i}: missing image file {}", path.display())));
            }
            let image = load_png(&path)?;
            let view = View {
                name: rec.image.clone(),
                camera,
                image,
            };
            view.validate().map_err(|e| Error::Dataset(format!("camera {i}: {e}")))?;
            Ok(view)
        })
        .collect::<Result<_>>()?;
    Ok(views)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let views = load_views(dir)?;
    let style_path = dir.join(STYLE_FILE);
    if !style_path.is_file() {
        return Err(Error::Dataset(format!("missing style image {}", style_path.display())));
    }
    Dataset::new(views, load_png(&style_path)?)
}

/// Writes `cameras.json` and the view images into `dir`.
pub fn write_views(dir: impl AsRef<Path>, views: &[View]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<CameraRecord> = views.iter().map(|v| CameraRecord::from_camera(&v.name, &v.camera)).collect();
    let json = serde_json::to_string_pretty(&records).expect("camera records serialize");
    let path = dir.join(CAMERAS_FILE);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    views.iter().try_for_each(|v| save_png(&v.image, dir.join(&v.name)))
}

pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    write_views(dir, &dataset.views)?;
    let style = dir.join(STYLE_FILE);
    save_png(&dataset.style, &style)?;
    Ok(style)
}
