//! Binary little-endian PLY import/export for the usual 3DGS vertex layout.
//!
//! Stored values are pre-activation: `scale_*` holds log-scales and
//! `opacity` holds the logit of the opacity. Rotations are stored as
//! `rot_0..rot_3 = (w, x, y, z)`. Only degree-0 color (`f_dc_*`) is kept;
//! higher-order `f_rest_*` coefficients are dropped.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;

use super::{GaussianGeometry, Gaussians, DEFAULT_FEATURE_DIM, DEFAULT_IDENTITY_DIM};
use crate::error::{Error, Result};

/// SH degree-0 basis constant; `color = 0.5 + SH_C0 * f_dc`.
pub const SH_C0: f32 = 0.282_094_8;

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2",
    "opacity", "f_dc_0", "f_dc_1", "f_dc_2",
];

#[derive(Debug, Clone, Copy)]
pub struct ImportOptions {
    pub feature_dim: usize,
    pub identity_dim: usize,
}

impl Default for ImportOptions {
    fn default() -> Self {
        Self {
            feature_dim: DEFAULT_FEATURE_DIM,
            identity_dim: DEFAULT_IDENTITY_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScalarType {
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

    fn size(self) -> usize {
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
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, ScalarType)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.props.iter().map(|(_, t)| t.size()).sum()
    }
}

fn import_err(msg: impl Into<String>) -> Error {
    Error::Import(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize)> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| import_err("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| import_err("header is not valid UTF-8"))?;
    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(import_err("not a PLY file"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, _] => {
                return Err(import_err(format!("unsupported PLY format {other}")))
            }
            ["element", name, count] => elements.push(Element {
                name: (*name).to_owned(),
                count: count
                    .parse()
                    .map_err(|_| import_err(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                let el = elements.last().map(|e| e.name.as_str()).unwrap_or("?");
                return Err(import_err(format!("list properties are not supported (element {el})")));
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| import_err(format!("unknown property type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| import_err("property before any element"))?
                    .props
                    .push(((*name).to_owned(), ty));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(import_err(format!("unrecognized header line: {line}"))),
        }
    }
    if !format_ok {
        return Err(import_err("missing binary_little_endian format line"));
    }
    Ok((elements, end + END.len()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reads Gaussians from a binary PLY, applying the scale/opacity
/// activations and normalizing quaternions. Feature arrays start at zero.
pub fn import_ply(path: impl AsRef<Path>, opts: ImportOptions) -> Result<Gaussians> {
    let bytes = fs::read(path)?;
    parse_ply(&bytes, opts)
}

pub fn parse_ply(bytes: &[u8], opts: ImportOptions) -> Result<Gaussians> {
    let (elements, mut offset) = parse_header(bytes)?;
    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        offset += el.count * el.stride();
    }
    let vertex = vertex.ok_or_else(|| import_err("no vertex element"))?;

    let mut columns = [(0usize, ScalarType::F32); REQUIRED.len()];
    for (slot, name) in columns.iter_mut().zip(REQUIRED) {
        let mut off = 0;
        let mut found = None;
        for (pname, ty) in &vertex.props {
            if pname == name {
                found = Some((off, *ty));
                break;
            }
            off += ty.size();
        }
        *slot = found.ok_or_else(|| import_err(format!("missing property {name}")))?;
    }
    let dropped = vertex
        .props
        .iter()
        .filter(|(n, _)| n.starts_with("f_rest_"))
        .count();
    if dropped > 0 {
        warn!("dropping {dropped} higher-order SH coefficients per Gaussian; only degree 0 is used");
    }

    let stride = vertex.stride();
    let needed = offset + vertex.count * stride;
    if bytes.len() < needed {
        return Err(import_err(format!(
            "vertex data truncated: need {needed} bytes, have {}",
            bytes.len()
        )));
    }

    let mut out = Gaussians::new(opts.feature_dim, opts.identity_dim);
    for i in 0..vertex.count {
        let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
        let mut v = [0f64; REQUIRED.len()];
        for (k, (off, ty)) in columns.iter().enumerate() {
            v[k] = ty.read(&row[*off..]);
            if !v[k].is_finite() {
                return Err(Error::Data {
                    index: i,
                    message: format!("non-finite {}", REQUIRED[k]),
                });
            }
        }
        let q = [v[3], v[4], v[5], v[6]];
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(qn > 0.0 && qn.is_finite()) {
            return Err(Error::Data {
                index: i,
                message: "zero quaternion".into(),
            });
        }
        let scale = [v[7].exp(), v[8].exp(), v[9].exp()];
        if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Data {
                index: i,
                message: "scale overflows after activation".into(),
            });
        }
        out.push(GaussianGeometry {
            position: [v[0] as f32, v[1] as f32, v[2] as f32],
            rotation: q.map(|x| (x / qn) as f32),
            scale: scale.map(|s| s as f32),
            opacity: sigmoid(v[10]) as f32,
            color: [v[11], v[12], v[13]].map(|c| (0.5 + SH_C0 as f64 * c) as f32),
        });
    }
    Ok(out)
}

/// Writes geometry and color as a binary PLY with pre-activation values.
pub fn export_ply(gaussians: &Gaussians, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ply_bytes(gaussians))?;
    Ok(())
}

pub fn ply_bytes(gaussians: &Gaussians) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        gaussians.len()
    );
    for name in REQUIRED {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());
    for i in 0..gaussians.len() {
        let g = gaussians.geometry(i);
        let o = (g.opacity as f64).clamp(1e-7, 1.0 - 1e-7);
        let vals = [
            g.position[0],
            g.position[1],
            g.position[2],
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.scale[0].ln(),
            g.scale[1].ln(),
            g.scale[2].ln(),
            (o / (1.0 - o)).ln() as f32,
            (g.color[0] - 0.5) / SH_C0,
            (g.color[1] - 0.5) / SH_C0,
            (g.color[2] - 0.5) / SH_C0,
        ];
        for v in vals {
            out.write_all(&v.to_le_bytes()).unwrap();
        }
    }
    out
}
