//! Binary little-endian PLY in the 3DGS property convention.
//!
//! Only the diffuse term is kept: `f_rest_*` properties are accepted on read
//! and dropped. Writes emit `f_dc_0..2` and nothing else for color, i.e. 12
//! bytes per Gaussian.

use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{clamp01, normalize_quat, ColorSource, Gaussian, GaussianScene};

/// Zeroth-order SH basis constant `1 / (2√π)`.
pub const SH_C0: f64 = 0.28209479177;
/// Color bytes per Gaussian for a degree-3 SH layout: 16 coefficients × RGB × f32.
pub const SH3_COLOR_BYTES: usize = 16 * 3 * 4;
/// Opacities are kept this far from 0 and 1 so the stored logit stays finite.
pub const OPACITY_MARGIN: f64 = 1e-7;

const BACKGROUND_COMMENT: &str = "background";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyProperty {
    pub name: String,
    pub ty: ScalarType,
    /// Byte offset within one vertex record.
    pub offset: usize,
}

/// Parsed header of a vertex-only PLY file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyLayout {
    pub vertex_count: usize,
    pub properties: Vec<PlyProperty>,
    /// Bytes per vertex record.
    pub stride: usize,
    /// Header length including the `end_header` line.
    pub header_bytes: usize,
    pub background: Option<Vector3<f64>>,
}

impl PlyLayout {
    pub fn property(&self, name: &str) -> Option<&PlyProperty> {
        self.properties.iter().find(|p| p.name == name)
    }

    /// Bytes per vertex spent on color coefficients (`f_dc_*` and `f_rest_*`).
    pub fn color_bytes_per_vertex(&self) -> usize {
        self.properties
            .iter()
            .filter(|p| p.name.starts_with("f_dc_") || p.name.starts_with("f_rest_"))
            .map(|p| p.ty.size())
            .sum()
    }

    pub fn data_bytes(&self) -> usize {
        self.vertex_count * self.stride
    }
}

fn ply_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Ply {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_header_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a str>) -> Result<PlyLayout> {
    let mut lines = lines.enumerate();
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(ply_err(path, "missing 'ply' magic line")),
    }
    let mut format_seen = false;
    let mut vertex_count = None;
    let mut properties: Vec<PlyProperty> = Vec::new();
    let mut stride = 0;
    let mut background = None;
    for (n, line) in lines {
        let line_no = n + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let fmt = tok.next().unwrap_or("");
                if fmt != "binary_little_endian" {
                    return Err(ply_err(path, format!("unsupported format '{fmt}' (line {line_no})")));
                }
                format_seen = true;
            }
            Some("comment") => {
                if tok.next() == Some(BACKGROUND_COMMENT) {
                    let v: Vec<f64> = tok.filter_map(|t| t.parse().ok()).collect();
                    if v.len() != 3 || !v.iter().all(|x| x.is_finite()) {
                        return Err(ply_err(path, format!("malformed background comment (line {line_no})")));
                    }
                    background = Some(Vector3::new(v[0], v[1], v[2]));
                }
            }
            Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().unwrap_or("");
                if vertex_count.is_some() || name != "vertex" {
                    return Err(ply_err(path, format!("unsupported element '{name}' (line {line_no})")));
                }
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| ply_err(path, format!("bad vertex count (line {line_no})")))?;
                vertex_count = Some(count);
            }
            Some("property") => {
                if vertex_count.is_none() {
                    return Err(ply_err(path, format!("property before element (line {line_no})")));
                }
                let ty_name = tok.next().unwrap_or("");
                if ty_name == "list" {
                    return Err(ply_err(path, format!("list properties are not supported (line {line_no})")));
                }
                let ty = ScalarType::parse(ty_name)
                    .ok_or_else(|| ply_err(path, format!("unknown property type '{ty_name}' (line {line_no})")))?;
                let name = tok
                    .next()
                    .ok_or_else(|| ply_err(path, format!("property without a name (line {line_no})")))?;
                if properties.iter().any(|p| p.name == name) {
                    return Err(ply_err(path, format!("duplicate property '{name}'")));
                }
                properties.push(PlyProperty {
                    name: name.to_string(),
                    ty,
                    offset: stride,
                });
                stride += ty.size();
            }
            Some("end_header") => {
                if !format_seen {
                    return Err(ply_err(path, "missing format line"));
                }
                let vertex_count = vertex_count.ok_or_else(|| ply_err(path, "missing vertex element"))?;
                return Ok(PlyLayout {
                    vertex_count,
                    properties,
                    stride,
                    header_bytes: 0,
                    background,
                });
            }
            Some(other) => {
                return Err(ply_err(path, format!("unexpected header keyword '{other}' (line {line_no})")));
            }
        }
    }
    Err(ply_err(path, "header is not terminated by end_header"))
}

fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(PlyLayout, &'a [u8])> {
    const END: &[u8] = b"end_header";
    let pos = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| ply_err(path, "header is not terminated by end_header"))?;
    let mut body = pos + END.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) != Some(&b'\n') {
        return Err(ply_err(path, "end_header must be followed by a newline"));
    }
    body += 1;
    let text = std::str::from_utf8(&bytes[..body]).map_err(|_| ply_err(path, "header is not valid UTF-8"))?;
    let mut layout = parse_header_lines(path, text.lines())?;
    layout.header_bytes = body;
    Ok((layout, &bytes[body..]))
}

/// Reads only the header of a PLY file.
pub fn read_ply_layout(path: impl AsRef<Path>) -> Result<PlyLayout> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut text = String::new();
    let mut header_bytes = 0;
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|_| ply_err(path, "header is not valid UTF-8"))?;
        if n == 0 {
            return Err(ply_err(path, "header is not terminated by end_header"));
        }
        header_bytes += n;
        let done = line.trim_end() == "end_header";
        text.push_str(&line);
        if done {
            break;
        }
    }
    let mut layout = parse_header_lines(path, text.lines())?;
    layout.header_bytes = header_bytes;
    Ok(layout)
}

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0",
    "f_dc_1", "f_dc_2",
];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes a PLY byte stream. `path` is only used in error messages.
pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<GaussianScene> {
    let (layout, body) = split_header(path, bytes)?;
    let props: Vec<&PlyProperty> = REQUIRED
        .iter()
        .map(|name| {
            layout
                .property(name)
                .ok_or_else(|| ply_err(path, format!("missing required property '{name}'")))
        })
        .collect::<Result<_>>()?;
    if layout.vertex_count == 0 {
        return Err(ply_err(path, "file contains no Gaussians"));
    }
    let expected = layout.data_bytes();
    if body.len() < expected {
        return Err(ply_err(
            path,
            format!(
                "truncated vertex data: expected {expected} bytes, found {} (vertex {} incomplete)",
                body.len(),
                body.len() / layout.stride.max(1)
            ),
        ));
    }
    if body.len() > expected {
        return Err(ply_err(path, format!("{} trailing bytes after vertex data", body.len() - expected)));
    }

    let mut gaussians = Vec::with_capacity(layout.vertex_count);
    let mut raw = [0.0; 14];
    for (i, rec) in body.chunks_exact(layout.stride).enumerate() {
        for (k, p) in props.iter().enumerate() {
            let v = p.ty.read(&rec[p.offset..]);
            if !v.is_finite() {
                return Err(ply_err(path, format!("vertex {i}: non-finite value in '{}'", p.name)));
            }
            raw[k] = v;
        }
        let rotation = normalize_quat(&[raw[7], raw[8], raw[9], raw[10]])
            .map_err(|e| ply_err(path, format!("vertex {i}: {e}")))?;
        let scales = Vector3::new(raw[4].exp(), raw[5].exp(), raw[6].exp());
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ply_err(path, format!("vertex {i}: scale out of range")));
        }
        let color = clamp01(&Vector3::new(
            0.5 + SH_C0 * raw[11],
            0.5 + SH_C0 * raw[12],
            0.5 + SH_C0 * raw[13],
        ));
        gaussians.push(Gaussian::new(
            Vector3::new(raw[0], raw[1], raw[2]),
            rotation,
            scales,
            sigmoid(raw[3]),
            color,
        ));
    }
    let mut scene = GaussianScene::new(gaussians);
    if let Some(bg) = layout.background {
        scene.background = clamp01(&bg);
    }
    Ok(scene)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&bytes, path)
}

/// Property order written by [`encode_ply`].
pub const WRITTEN_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
    "rot_2", "rot_3",
];

/// Serializes `scene` with the chosen color set as the diffuse color.
pub fn encode_ply(scene: &GaussianScene, source: ColorSource) -> Result<Vec<u8>> {
    scene.validate()?;
    let mut out = Vec::with_capacity(256 + scene.len() * WRITTEN_PROPERTIES.len() * 4);
    let bg = scene.background;
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment {BACKGROUND_COMMENT} {:?} {:?} {:?}\nelement vertex {}\n",
        bg.x,
        bg.y,
        bg.z,
        scene.len()
    );
    for name in WRITTEN_PROPERTIES {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());

    for g in &scene.gaussians {
        let c = g.color(source);
        let o = g.opacity.clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN);
        let q = normalize_quat(&g.rotation)?;
        let values = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            (c.x - 0.5) / SH_C0,
            (c.y - 0.5) / SH_C0,
            (c.z - 0.5) / SH_C0,
            (o / (1.0 - o)).ln(),
            g.scales.x.ln(),
            g.scales.y.ln(),
            g.scales.z.ln(),
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_ply(scene: &GaussianScene, source: ColorSource, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ply(scene, source)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
