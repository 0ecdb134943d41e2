//! File formats: PLY meshes, PFM float maps, SIMV voxel volumes, 16-bit PNG
//! masks/images, calibration CSV and JSON documents.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationError, CalibrationView, Correspondences2D3D};
use crate::geometry::{CameraIntrinsics, FrameChain, GeometryError, RigidTransform, Vec3};
use crate::meshops::{MeshError, TriangleMesh};
use crate::raster::{AnnotationImage, DepthMap, GrayImage, Raster, RasterError};
use crate::voxelgrid::{AnomalyVolume, GridSpec, GroundTruthVolume, VoxelError, VoxelMask};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("malformed {format}: {message}")]
    Format { format: &'static str, message: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_err(format: &'static str, message: impl Into<String>) -> IoError {
    IoError::Format { format, message: message.into() }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File { path: path.to_owned(), source })
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io = |source| IoError::File { path: path.to_owned(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

/// Attaches the path to decoding errors.
fn in_file<T>(path: &Path, r: Result<T, IoError>) -> Result<T, IoError> {
    r.map_err(|e| match e {
        IoError::File { .. } => e,
        other => IoError::Parse { path: path.to_owned(), message: other.to_string() },
    })
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

/// Encodes vertices as doubles, `label` as ushort when present, and faces as
/// `list uchar int`.
pub fn encode_ply(mesh: &TriangleMesh, format: PlyFormat) -> Vec<u8> {
    let mut out = String::from("ply\n");
    out.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    out.push_str(&format!("element vertex {}\nproperty double x\nproperty double y\nproperty double z\n", mesh.vertices().len()));
    let labels = mesh.labels();
    if labels.is_some() {
        out.push_str("property ushort label\n");
    }
    out.push_str(&format!("element face {}\nproperty list uchar int vertex_indices\nend_header\n", mesh.triangles().len()));
    let mut bytes = out.into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut body = String::new();
            for (i, v) in mesh.vertices().iter().enumerate() {
                body.push_str(&format!("{} {} {}", v.x, v.y, v.z));
                if let Some(l) = labels {
                    body.push_str(&format!(" {}", l[i]));
                }
                body.push('\n');
            }
            for t in mesh.triangles() {
                body.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
            }
            bytes.extend_from_slice(body.as_bytes());
        }
        PlyFormat::BinaryLittleEndian => {
            for (i, v) in mesh.vertices().iter().enumerate() {
                for c in v.iter() {
                    bytes.extend_from_slice(&c.to_le_bytes());
                }
                if let Some(l) = labels {
                    bytes.extend_from_slice(&l[i].to_le_bytes());
                }
            }
            for t in mesh.triangles() {
                bytes.push(3);
                for &i in t {
                    bytes.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
        }
    }
    bytes
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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

    fn read_le(self, b: &[u8]) -> f64 {
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

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Reads values from either body encoding.
enum Body<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary(&'a [u8]),
}

impl Body<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64, IoError> {
        match self {
            Body::Ascii(tokens) => {
                let tok = tokens.next().ok_or_else(|| format_err("PLY", "unexpected end of data"))?;
                tok.parse::<f64>().map_err(|_| format_err("PLY", format!("bad number {tok:?}")))
            }
            Body::Binary(rest) => {
                let n = ty.size();
                if rest.len() < n {
                    return Err(format_err("PLY", "unexpected end of data"));
                }
                let v = ty.read_le(&rest[..n]);
                *rest = &rest[n..];
                Ok(v)
            }
        }
    }
}

/// Decodes ASCII or binary little-endian PLY. Vertex `x y z` (float or
/// double) are required; an integer `label` property and polygonal faces
/// (fan-triangulated) are optional; other properties and elements are skipped.
pub fn decode_ply(bytes: &[u8]) -> Result<TriangleMesh, IoError> {
    let marker = b"end_header";
    let pos = bytes.windows(marker.len()).position(|w| w == marker).ok_or_else(|| format_err("PLY", "no end_header"))?;
    let mut body_start = pos + marker.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| format_err("PLY", "header is not UTF-8"))?;
    let mut lines = header.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(format_err("PLY", "missing magic"));
    }
    let mut ascii = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => ascii = Some(true),
            ["format", "binary_little_endian", _] => ascii = Some(false),
            ["format", other, ..] => return Err(format_err("PLY", format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| format_err("PLY", format!("bad element count {count:?}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count_ty, item_ty, name] => {
                let (c, i) = (Scalar::parse(count_ty), Scalar::parse(item_ty));
                let (Some(c), Some(i)) = (c, i) else { return Err(format_err("PLY", format!("bad list types in {line:?}"))) };
                elements.last_mut().ok_or_else(|| format_err("PLY", "property before element"))?.properties.push(Property::List(name.to_string(), c, i));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| format_err("PLY", format!("unknown type in {line:?}")))?;
                elements.last_mut().ok_or_else(|| format_err("PLY", "property before element"))?.properties.push(Property::Scalar(name.to_string(), ty));
            }
            _ => return Err(format_err("PLY", format!("unrecognised header line {line:?}"))),
        }
    }
    let ascii = ascii.ok_or_else(|| format_err("PLY", "missing format line"))?;
    let mut body = if ascii {
        let text = std::str::from_utf8(&bytes[body_start..]).map_err(|_| format_err("PLY", "ASCII body is not UTF-8"))?;
        Body::Ascii(text.split_ascii_whitespace())
    } else {
        Body::Binary(&bytes[body_start..])
    };
    let mut vertices = Vec::new();
    let mut labels: Option<Vec<u16>> = None;
    let mut triangles = Vec::new();
    for el in &elements {
        let find = |want: &str| el.properties.iter().position(|p| matches!(p, Property::Scalar(n, _) if n == want));
        let is_vertex = el.name == "vertex";
        let xyz = [find("x"), find("y"), find("z")];
        let label_at = find("label");
        if is_vertex {
            if xyz.iter().any(Option::is_none) {
                return Err(format_err("PLY", "vertex element lacks x/y/z"));
            }
            vertices.reserve(el.count);
            if label_at.is_some() {
                labels = Some(Vec::with_capacity(el.count));
            }
        }
        for _ in 0..el.count {
            let mut scalars = vec![0.0; el.properties.len()];
            for (k, prop) in el.properties.iter().enumerate() {
                match prop {
                    Property::Scalar(_, ty) => scalars[k] = body.next(*ty)?,
                    Property::List(name, count_ty, item_ty) => {
                        let n = body.next(*count_ty)?;
                        if !(n >= 0.0 && n.fract() == 0.0) {
                            return Err(format_err("PLY", format!("bad list length {n}")));
                        }
                        let items = (0..n as usize).map(|_| body.next(*item_ty)).collect::<Result<Vec<f64>, _>>()?;
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if items.iter().any(|&i| !(i >= 0.0 && i <= u32::MAX as f64 && i.fract() == 0.0)) {
                                return Err(format_err("PLY", "bad vertex index"));
                            }
                            for j in 1..items.len().saturating_sub(1) {
                                triangles.push([items[0] as u32, items[j] as u32, items[j + 1] as u32]);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                vertices.push(Vec3::new(scalars[xyz[0].unwrap()], scalars[xyz[1].unwrap()], scalars[xyz[2].unwrap()]));
                if let (Some(k), Some(l)) = (label_at, labels.as_mut()) {
                    let v = scalars[k];
                    if !(v >= 0.0 && v <= u16::MAX as f64 && v.fract() == 0.0) {
                        return Err(format_err("PLY", format!("label {v} is not a 16-bit ID")));
                    }
                    l.push(v as u16);
                }
            }
        }
    }
    Ok(TriangleMesh::new(vertices, triangles, labels)?)
}

pub fn write_ply(path: &Path, mesh: &TriangleMesh, format: PlyFormat) -> Result<(), IoError> {
    write_bytes(path, &encode_ply(mesh, format))
}

pub fn read_ply(path: &Path) -> Result<TriangleMesh, IoError> {
    in_file(path, decode_ply(&read_bytes(path)?))
}

// ---------------------------------------------------------------- PFM

/// Single-channel little-endian PFM; rows are stored bottom to top.
pub fn encode_pfm(map: &Raster<f32>) -> Vec<u8> {
    let (w, h) = (map.width() as usize, map.height() as usize);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for row in (0..h).rev() {
        for v in &map.data()[row * w..(row + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Accepts either endianness; colour (`PF`) maps are rejected.
pub fn decode_pfm(bytes: &[u8]) -> Result<Raster<f32>, IoError> {
    let mut pos = 0;
    let mut token = || -> Result<String, IoError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("PFM", "truncated header"));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        // the single whitespace byte after the scale ends the header
        pos += 1;
        Ok(t)
    };
    match token()?.as_str() {
        "Pf" => {}
        "PF" => return Err(format_err("PFM", "3-channel maps are not supported")),
        other => return Err(format_err("PFM", format!("bad magic {other:?}"))),
    }
    let dim = |t: String| t.parse::<u32>().map_err(|_| format_err("PFM", format!("bad dimension {t:?}")));
    let w = dim(token()?)?;
    let h = dim(token()?)?;
    let scale_tok = token()?;
    let scale: f64 = scale_tok.parse().map_err(|_| format_err("PFM", format!("bad scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err("PFM", "scale must be nonzero"));
    }
    let little = scale < 0.0;
    let (wu, hu) = (w as usize, h as usize);
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != wu * hu * 4 {
        return Err(format_err("PFM", format!("{} payload bytes for {w}x{h}", payload.len())));
    }
    let mut data = vec![0f32; wu * hu];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (k / wu, k % wu);
        data[(hu - 1 - file_row) * wu + col] = v;
    }
    Ok(Raster::new(w, h, data)?)
}

pub fn write_pfm(path: &Path, map: &Raster<f32>) -> Result<(), IoError> {
    write_bytes(path, &encode_pfm(map))
}

pub fn read_pfm(path: &Path) -> Result<Raster<f32>, IoError> {
    in_file(path, decode_pfm(&read_bytes(path)?))
}

/// Depth maps are stored as f32 millimetres; 0 marks invalid pixels.
pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    let f = Raster::new(depth.width(), depth.height(), depth.data().iter().map(|&d| d as f32).collect())?;
    write_pfm(path, &f)
}

/// Non-finite or negative depths are read as invalid (0).
pub fn read_depth_pfm(path: &Path) -> Result<DepthMap, IoError> {
    let f = read_pfm(path)?;
    let data = f.data().iter().map(|&d| if d.is_finite() && d > 0.0 { d as f64 } else { 0.0 }).collect();
    Ok(DepthMap::new(f.width(), f.height(), data)?)
}

// ---------------------------------------------------------------- SIMV

const SIMV_MAGIC: &[u8; 4] = b"SIMV";
const SIMV_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SimvVolume {
    /// Payload kind 0: f32 scores, mask = touched voxels.
    Scores(AnomalyVolume),
    /// Payload kind 1: u16 defect IDs, mask = occupancy.
    Labels(GroundTruthVolume),
}

fn simv_header(out: &mut Vec<u8>, kind: u8, spec: &GridSpec, mask: &VoxelMask) {
    out.extend_from_slice(SIMV_MAGIC);
    out.extend_from_slice(&SIMV_VERSION.to_le_bytes());
    out.push(kind);
    for o in spec.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&spec.voxel_size.to_le_bytes());
    for d in spec.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(mask.as_bytes());
}

pub fn encode_simv(volume: &SimvVolume) -> Vec<u8> {
    let mut out = Vec::new();
    match volume {
        SimvVolume::Scores(v) => {
            simv_header(&mut out, 0, v.spec(), v.touched());
            for s in v.scores() {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        SimvVolume::Labels(g) => {
            simv_header(&mut out, 1, g.spec(), g.occupancy());
            for l in g.labels() {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_simv(bytes: &[u8]) -> Result<SimvVolume, IoError> {
    const HEADER: usize = 4 + 4 + 1 + 24 + 8 + 12;
    if bytes.len() < HEADER || &bytes[..4] != SIMV_MAGIC {
        return Err(format_err("SIMV", "bad magic or truncated header"));
    }
    let u32_at = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
    let f64_at = |k: usize| f64::from_le_bytes(bytes[k..k + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != SIMV_VERSION {
        return Err(format_err("SIMV", format!("unsupported version {version}")));
    }
    let kind = bytes[8];
    let spec = GridSpec::new([f64_at(9), f64_at(17), f64_at(25)], f64_at(33), [u32_at(41), u32_at(45), u32_at(49)])?;
    let n = spec.voxel_count();
    let mask_len = n.div_ceil(8);
    let item = match kind {
        0 => 4,
        1 => 2,
        k => return Err(format_err("SIMV", format!("unknown payload kind {k}"))),
    };
    if bytes.len() != HEADER + mask_len + n * item {
        return Err(format_err("SIMV", format!("{} bytes, expected {}", bytes.len(), HEADER + mask_len + n * item)));
    }
    let mask = VoxelMask::from_bytes(n, bytes[HEADER..HEADER + mask_len].to_vec()).ok_or_else(|| format_err("SIMV", "nonzero padding bits in mask"))?;
    let payload = &bytes[HEADER + mask_len..];
    Ok(match kind {
        0 => {
            let scores = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            SimvVolume::Scores(AnomalyVolume::new(spec, scores, mask)?)
        }
        _ => {
            let labels = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            SimvVolume::Labels(GroundTruthVolume::new(spec, mask, labels)?)
        }
    })
}

pub fn write_simv(path: &Path, volume: &SimvVolume) -> Result<(), IoError> {
    write_bytes(path, &encode_simv(volume))
}

pub fn read_simv(path: &Path) -> Result<SimvVolume, IoError> {
    in_file(path, decode_simv(&read_bytes(path)?))
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthVolume, IoError> {
    match read_simv(path)? {
        SimvVolume::Labels(g) => Ok(g),
        SimvVolume::Scores(_) => Err(IoError::Parse { path: path.to_owned(), message: "expected a label volume (kind 1), found scores".into() }),
    }
}

pub fn read_anomaly_volume(path: &Path) -> Result<AnomalyVolume, IoError> {
    match read_simv(path)? {
        SimvVolume::Scores(v) => Ok(v),
        SimvVolume::Labels(_) => Err(IoError::Parse { path: path.to_owned(), message: "expected a score volume (kind 0), found labels".into() }),
    }
}

// ---------------------------------------------------------------- JSON

/// Camera setup of one acquisition: intrinsics, `[R_pc|T_pc]` and one
/// `[R_i|T_i]` per view (view 0 = identity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSetup {
    pub intrinsics: CameraIntrinsics,
    pub sensor_to_camera: RigidTransform,
    pub views: Vec<RigidTransform>,
}

impl ScanSetup {
    pub fn from_chain(intrinsics: CameraIntrinsics, chain: &FrameChain) -> Self {
        Self { intrinsics, sensor_to_camera: *chain.sensor_to_camera(), views: chain.views().to_vec() }
    }

    pub fn chain(&self) -> Result<FrameChain, GeometryError> {
        FrameChain::new(self.sensor_to_camera, self.views.clone())
    }
}

/// Pretty JSON with a trailing newline.
pub fn encode_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, IoError> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    write_bytes(path, &encode_json(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::Parse { path: path.to_owned(), message: e.to_string() })
}

// ---------------------------------------------------------------- PNG

/// Raw grayscale samples and the file's bit depth (8 or 16).
fn decode_png_gray(bytes: &[u8]) -> Result<(Raster<u16>, u8), IoError> {
    let err = |e: png::DecodingError| format_err("PNG", e.to_string());
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| format_err("PNG", "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(format_err("PNG", format!("expected single-channel grayscale, got {:?}", info.color_type)));
    }
    let data: Vec<u16> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| b as u16).collect(),
        other => return Err(format_err("PNG", format!("unsupported bit depth {other:?}"))),
    };
    let depth = if info.bit_depth == png::BitDepth::Sixteen { 16 } else { 8 };
    Ok((Raster::new(info.width, info.height, data)?, depth))
}

/// 16-bit single-channel PNG.
pub fn encode_png16(image: &Raster<u16>) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width(), image.height());
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Sixteen);
        let mut writer = encoder.write_header().expect("in-memory PNG header");
        let be: Vec<u8> = image.data().iter().flat_map(|v| v.to_be_bytes()).collect();
        writer.write_image_data(&be).expect("in-memory PNG data");
    }
    out
}

pub fn write_annotation_png(path: &Path, mask: &AnnotationImage) -> Result<(), IoError> {
    write_bytes(path, &encode_png16(mask))
}

/// Defect-ID masks: sample values are IDs as stored (8- or 16-bit).
pub fn read_annotation_png(path: &Path) -> Result<AnnotationImage, IoError> {
    in_file(path, decode_png_gray(&read_bytes(path)?).map(|(r, _)| r))
}

/// Intensities in `[0, 1]` quantised to 16 bits.
pub fn write_gray_png(path: &Path, image: &GrayImage) -> Result<(), IoError> {
    let q = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    write_bytes(path, &encode_png16(&Raster::new(image.width(), image.height(), q)?))
}

pub fn read_gray_png(path: &Path) -> Result<GrayImage, IoError> {
    let (raw, depth) = in_file(path, decode_png_gray(&read_bytes(path)?))?;
    let full = if depth == 16 { 65535.0 } else { 255.0 };
    Ok(GrayImage::new(raw.width(), raw.height(), raw.data().iter().map(|&v| v as f32 / full).collect())?)
}

// ---------------------------------------------------------------- CSV

/// One dot: pixel, pattern-frame centre and sensor-frame centre (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceRow {
    pub view_id: usize,
    pub u: f64,
    pub v: f64,
    #[serde(rename = "Xp")]
    pub xp: f64,
    #[serde(rename = "Yp")]
    pub yp: f64,
    #[serde(rename = "Zp")]
    pub zp: f64,
    #[serde(rename = "Xs")]
    pub xs: f64,
    #[serde(rename = "Ys")]
    pub ys: f64,
    #[serde(rename = "Zs")]
    pub zs: f64,
}

pub fn encode_correspondences(views: &[(usize, CalibrationView)]) -> Result<Vec<u8>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (id, view) in views {
        for ((px, p), s) in view.image.pixels().iter().zip(view.image.points()).zip(&view.sensor_points) {
            w.serialize(CorrespondenceRow { view_id: *id, u: px[0], v: px[1], xp: p.x, yp: p.y, zp: p.z, xs: s.x, ys: s.y, zs: s.z })?;
        }
    }
    w.into_inner().map_err(|e| format_err("CSV", e.to_string()))
}

/// Groups rows by `view_id`, ascending.
pub fn decode_correspondences(bytes: &[u8]) -> Result<Vec<(usize, CalibrationView)>, IoError> {
    let mut groups: BTreeMap<usize, Vec<CorrespondenceRow>> = BTreeMap::new();
    for row in csv::Reader::from_reader(bytes).deserialize() {
        let row: CorrespondenceRow = row?;
        groups.entry(row.view_id).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|(id, rows)| {
            let pixels = rows.iter().map(|r| [r.u, r.v]).collect();
            let pattern = rows.iter().map(|r| Vec3::new(r.xp, r.yp, r.zp)).collect();
            let sensor = rows.iter().map(|r| Vec3::new(r.xs, r.ys, r.zs)).collect();
            let view = Correspondences2D3D::new(pixels, pattern).and_then(|c| CalibrationView::new(c, sensor));
            view.map(|v| (id, v)).map_err(|e| CalibrationError::View { view: id, source: Box::new(e) }.into())
        })
        .collect()
}

pub fn write_correspondences(path: &Path, views: &[(usize, CalibrationView)]) -> Result<(), IoError> {
    write_bytes(path, &encode_correspondences(views)?)
}

pub fn read_correspondences(path: &Path) -> Result<Vec<(usize, CalibrationView)>, IoError> {
    in_file(path, decode_correspondences(&read_bytes(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::BaseShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labeled_sphere() -> TriangleMesh {
        let s = BaseShape::Sphere { radius: 12.5 }.tessellate(2);
        let labels = (0..s.vertices().len()).map(|i| (i % 5) as u16 * 1000).collect();
        s.with_labels(labels).unwrap()
    }

    #[test]
    fn ply_round_trips_both_encodings() {
        let mesh = labeled_sphere();
        for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let bytes = encode_ply(&mesh, format);
            let back = decode_ply(&bytes).unwrap();
            assert_eq!(back, mesh);
            assert_eq!(encode_ply(&back, format), bytes);
        }
        let plain = BaseShape::Box { size: [1.0, 2.0, 3.0] }.tessellate(0);
        assert_eq!(decode_ply(&encode_ply(&plain, PlyFormat::Ascii)).unwrap().labels(), None);
    }

    #[test]
    fn ply_reads_foreign_layouts() {
        let text = "ply\nformat ascii 1.0\ncomment made elsewhere\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\n\
                    element face 1\nproperty list uchar uint vertex_index\nend_header\n0 0 0 255\n1 0 0 0\n1 1 0 0\n0 1 0 9\n4 0 1 2 3\n";
        let mesh = decode_ply(text.as_bytes()).unwrap();
        assert_eq!(mesh.vertices().len(), 4);
        assert_eq!(mesh.triangles(), &[[0, 1, 2], [0, 2, 3]]);
        assert!(decode_ply(b"ply\nformat binary_big_endian 1.0\nend_header\n").is_err());
        assert!(decode_ply(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n").is_err());
    }

    #[test]
    fn pfm_layout_and_round_trip() {
        let map = Raster::new(3, 2, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_pfm(&map);
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // bottom row first
        assert_eq!(f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap()), 4.0);
        let back = decode_pfm(&bytes).unwrap();
        assert_eq!(back, map);
        assert_eq!(encode_pfm(&back), bytes);
    }

    #[test]
    fn pfm_big_endian_and_errors() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[1.5, -2.0]);
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0").is_err());
    }

    #[test]
    fn simv_layout_is_exact() {
        let spec = GridSpec::new([1.0, -2.0, 0.5], 2.0, [3, 1, 1]).unwrap();
        let mut vol = AnomalyVolume::empty(spec);
        vol.accumulate(2, 0.75);
        let bytes = encode_simv(&SimvVolume::Scores(vol.clone()));
        let mut expected = b"SIMV".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(0);
        for v in [1.0f64, -2.0, 0.5, 2.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        for d in [3u32, 1, 1] {
            expected.extend_from_slice(&d.to_le_bytes());
        }
        expected.push(0b100);
        for s in [0.0f32, 0.0, 0.75] {
            expected.extend_from_slice(&s.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(decode_simv(&bytes).unwrap(), SimvVolume::Scores(vol));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_simv(&bad).is_err());
        assert!(decode_simv(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn simv_label_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = GridSpec::new([0.0; 3], 1.5, [5, 4, 3]).unwrap();
        let occ = VoxelMask::from_fn(60, |i| i % 3 != 0);
        let labels = (0..60).map(|i| if i % 3 != 0 && rng.random_bool(0.3) { rng.random_range(1..9) } else { 0 }).collect();
        let gt = SimvVolume::Labels(GroundTruthVolume::new(spec, occ, labels).unwrap());
        let bytes = encode_simv(&gt);
        assert_eq!(decode_simv(&bytes).unwrap(), gt);
    }

    #[test]
    fn setup_json_round_trip() {
        let intr = CameraIntrinsics::new(560.25, 559.5, 127.5, 128.1, 256, 256, [0.01, -0.002, 0.0, 1e-4, 0.0]).unwrap();
        let s2c = RigidTransform::from_axis_angle(Vec3::new(0.1, -0.2, 0.3), Vec3::new(1.0, 2.0, 3.0));
        let chain = FrameChain::new(s2c, vec![RigidTransform::identity(), RigidTransform::from_axis_angle(Vec3::new(0.0, 0.5, 0.0), Vec3::new(-5.0, 0.0, 1.0))]).unwrap();
        let setup = ScanSetup::from_chain(intr, &chain);
        let bytes = encode_json(&setup).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"dist\"") && text.contains("\"rotation\""));
        let back: ScanSetup = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, setup);
        assert_eq!(back.chain().unwrap(), chain);
        assert_eq!(encode_json(&back).unwrap(), bytes);
    }

    #[test]
    fn png_and_csv_files() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Raster::new(4, 3, (0..12u16).map(|i| i * 5000).collect()).unwrap();
        let p = dir.path().join("a/mask.png");
        write_annotation_png(&p, &mask).unwrap();
        assert_eq!(read_annotation_png(&p).unwrap(), mask);
        let img = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        write_gray_png(&dir.path().join("g.png"), &img).unwrap();
        assert_eq!(read_gray_png(&dir.path().join("g.png")).unwrap(), img);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let intr = CameraIntrinsics::pinhole(800.0, 800.0, 320.0, 240.0, 640, 480).unwrap();
        let views = crate::synthbench::synthetic_calibration_views(&mut rng, &RigidTransform::identity(), &intr, 2, 0.1, 0.01);
        let numbered: Vec<_> = views.into_iter().enumerate().map(|(k, v)| (k * 10, v)).collect();
        let csv_path = dir.path().join("c.csv");
        write_correspondences(&csv_path, &numbered).unwrap();
        let back = read_correspondences(&csv_path).unwrap();
        assert_eq!(back, numbered);
        let head = std::fs::read_to_string(&csv_path).unwrap();
        assert!(head.starts_with("view_id,u,v,Xp,Yp,Zp,Xs,Ys,Zs\n"));
        assert!(matches!(read_ply(&dir.path().join("missing.ply")), Err(IoError::File { .. })));
    }
}
