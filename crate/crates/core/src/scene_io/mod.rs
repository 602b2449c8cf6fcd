//! Scene, image and dataset I/O.

mod dataset;
mod ply;
mod png;

pub use dataset::{
    load_dataset, load_views, read_camera_records, validate_views, write_dataset, write_views, Dataset, View,
    CAMERAS_FILE, STYLE_FILE,
};
pub use ply::{
    decode_ply, encode_ply, read_ply, read_ply_layout, write_ply, PlyLayout, PlyProperty, ScalarType, OPACITY_MARGIN,
    SH3_COLOR_BYTES, SH_C0, WRITTEN_PROPERTIES,
};
pub use png::{from_dynamic, load_png, quantize, save_png};
