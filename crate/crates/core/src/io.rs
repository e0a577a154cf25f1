//! File formats: raw float scans, PLY point clouds, TUM/KITTI trajectories,
//! the splat model container and portable float maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use thiserror::Error;

use crate::evaluation::Trajectory;
use crate::geometry::{Grid, SE3Pose, Vec3};
use crate::splats::{Splat, SplatModel};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}: unknown file extension")]
    UnknownExtension(PathBuf),
    #[error("{0}: file is truncated")]
    Truncated(PathBuf),
    #[error("{0}: no finite points")]
    NoFinitePoints(PathBuf),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_owned(),
        msg: msg.into(),
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Points read from a scan file after non-finite rows were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScan {
    pub points: Vec<Vec3>,
    pub dropped: usize,
}

/// Reads `.bin` (little-endian f32 x, y, z, intensity records) or `.ply`.
pub fn load_scan(path: &Path) -> Result<LoadedScan, IoError> {
    let raw = match extension(path).as_str() {
        "bin" => read_kitti_bin(path)?,
        "ply" => read_ply(path)?.points,
        _ => return Err(IoError::UnknownExtension(path.to_owned())),
    };
    let total = raw.len();
    let points: Vec<Vec3> = raw
        .into_iter()
        .filter(|p| p.iter().all(|v| v.is_finite()))
        .collect();
    if points.is_empty() {
        return Err(IoError::NoFinitePoints(path.to_owned()));
    }
    Ok(LoadedScan {
        dropped: total - points.len(),
        points,
    })
}

fn read_kitti_bin(path: &Path) -> Result<Vec<Vec3>, IoError> {
    let bytes = read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(IoError::Truncated(path.to_owned()));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            Vec3::new(f(0), f(1), f(2))
        })
        .collect())
}

/// Writes points as `.bin` records with zero intensity.
pub fn write_kitti_bin(path: &Path, points: &[Vec3]) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Points and, when all of `nx ny nz` are present, normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let a: [u8; $n] = b[..$n].try_into().unwrap();
                (if big {
                    <$t>::from_be_bytes(a)
                } else {
                    <$t>::from_le_bytes(a)
                }) as f64
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Encoding {
    Ascii,
    Binary { big_endian: bool },
}

struct PlyHeader {
    encoding: Encoding,
    vertices: usize,
    properties: Vec<(String, Scalar)>,
    body: usize,
}

fn parse_ply_header(path: &Path, bytes: &[u8]) -> Result<PlyHeader, IoError> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let Some(end) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(IoError::Truncated(path.to_owned()));
        };
        let line = String::from_utf8_lossy(&bytes[pos..pos + end])
            .trim()
            .to_string();
        pos += end + 1;
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(format_err(path, "missing ply magic"));
    }
    let mut encoding = None;
    let mut vertices = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    for line in &lines[1..] {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", _] => {
                encoding = Some(Encoding::Binary { big_endian: false })
            }
            ["format", "binary_big_endian", _] => {
                encoding = Some(Encoding::Binary { big_endian: true })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                if vertices.is_some() && in_vertex {
                    in_vertex = false;
                } else if vertices.is_none() {
                    if *name != "vertex" {
                        return Err(format_err(path, "the vertex element must come first"));
                    }
                    vertices = Some(
                        n.parse::<usize>()
                            .map_err(|_| format_err(path, "bad vertex count"))?,
                    );
                    in_vertex = true;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(format_err(
                    path,
                    "list properties on vertices are unsupported",
                ));
            }
            ["property", ty, name] if in_vertex => {
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| format_err(path, format!("unknown property type {ty}")))?;
                properties.push((name.to_string(), ty));
            }
            ["property", ..] => {}
            _ => return Err(format_err(path, format!("unexpected header line '{line}'"))),
        }
    }
    Ok(PlyHeader {
        encoding: encoding.ok_or_else(|| format_err(path, "missing format line"))?,
        vertices: vertices.ok_or_else(|| format_err(path, "missing vertex element"))?,
        properties,
        body: pos,
    })
}

pub fn read_ply(path: &Path) -> Result<PlyCloud, IoError> {
    let bytes = read(path)?;
    let header = parse_ply_header(path, &bytes)?;
    let find = |name: &str| header.properties.iter().position(|(n, _)| n == name);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(format_err(path, "vertex element lacks x, y, z"));
    };
    let normal_cols = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let np = header.properties.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(header.vertices);
    match header.encoding {
        Encoding::Ascii => {
            let text = String::from_utf8_lossy(&bytes[header.body..]);
            let mut tokens = text.split_whitespace();
            for _ in 0..header.vertices {
                let mut row = Vec::with_capacity(np);
                for _ in 0..np {
                    let t = tokens
                        .next()
                        .ok_or_else(|| IoError::Truncated(path.to_owned()))?;
                    row.push(
                        t.parse::<f64>()
                            .map_err(|_| format_err(path, format!("bad number '{t}'")))?,
                    );
                }
                rows.push(row);
            }
        }
        Encoding::Binary { big_endian } => {
            let stride: usize = header.properties.iter().map(|(_, t)| t.size()).sum();
            let body = &bytes[header.body..];
            if body.len() < stride * header.vertices {
                return Err(IoError::Truncated(path.to_owned()));
            }
            for rec in body.chunks_exact(stride).take(header.vertices) {
                let mut off = 0;
                let mut row = Vec::with_capacity(np);
                for (_, t) in &header.properties {
                    row.push(t.decode(&rec[off..], big_endian));
                    off += t.size();
                }
                rows.push(row);
            }
        }
    }
    let points = rows
        .iter()
        .map(|r| Vec3::new(r[ix], r[iy], r[iz]))
        .collect();
    let normals =
        normal_cols.map(|[a, b, c]| rows.iter().map(|r| Vec3::new(r[a], r[b], r[c])).collect());
    Ok(PlyCloud { points, normals })
}

/// Writes `double` vertex properties so that a read returns the exact values.
pub fn write_ply(
    path: &Path,
    points: &[Vec3],
    normals: Option<&[Vec3]>,
    format: PlyFormat,
) -> Result<(), IoError> {
    if let Some(n) = normals {
        if n.len() != points.len() {
            return Err(format_err(path, "normal count differs from point count"));
        }
    }
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", points.len());
    let names: &[&str] = if normals.is_some() {
        &["x", "y", "z", "nx", "ny", "nz"]
    } else {
        &["x", "y", "z"]
    };
    for n in names {
        let _ = writeln!(header, "property double {n}");
    }
    header.push_str("end_header\n");
    let mut bytes = header.into_bytes();
    for (i, p) in points.iter().enumerate() {
        let mut vals = vec![p.x, p.y, p.z];
        if let Some(n) = normals {
            vals.extend_from_slice(&[n[i].x, n[i].y, n[i].z]);
        }
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
                bytes.extend_from_slice(line.join(" ").as_bytes());
                bytes.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in vals {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    write(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    /// `timestamp tx ty tz qx qy qz qw`
    Tum,
    /// Row-major 3x4 pose matrix; row index serves as timestamp.
    Kitti,
}

impl TrajectoryFormat {
    /// `.kitti` files are KITTI, anything else TUM.
    pub fn from_path(path: &Path) -> Self {
        match extension(path).as_str() {
            "kitti" => TrajectoryFormat::Kitti,
            _ => TrajectoryFormat::Tum,
        }
    }
}

impl std::str::FromStr for TrajectoryFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tum" => Ok(TrajectoryFormat::Tum),
            "kitti" => Ok(TrajectoryFormat::Kitti),
            _ => Err(format!("unknown trajectory format '{s}'")),
        }
    }
}

// Formatting -0 as 0 keeps identity rows tidy.
fn num(v: f64) -> String {
    (v + 0.0).to_string()
}

pub fn format_trajectory(traj: &Trajectory, format: TrajectoryFormat) -> String {
    let mut out = String::new();
    for (t, pose) in traj.timestamps.iter().zip(&traj.poses) {
        let vals: Vec<f64> = match format {
            TrajectoryFormat::Tum => {
                let q = pose.quaternion();
                let mut c = q.into_inner().coords;
                c /= c.norm();
                let tr = pose.translation;
                vec![*t, tr.x, tr.y, tr.z, c.x, c.y, c.z, c.w]
            }
            TrajectoryFormat::Kitti => {
                let (r, tr) = (&pose.rotation, &pose.translation);
                (0..3)
                    .flat_map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)], tr[i]])
                    .collect()
            }
        };
        let line: Vec<String> = vals.into_iter().map(num).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn save_trajectory(
    traj: &Trajectory,
    path: &Path,
    format: TrajectoryFormat,
) -> Result<(), IoError> {
    if traj.is_empty() {
        return Err(format_err(path, "trajectory is empty"));
    }
    write(path, format_trajectory(traj, format).as_bytes())
}

pub fn parse_trajectory(text: &str, format: TrajectoryFormat) -> Result<Trajectory, String> {
    let mut times = Vec::new();
    let mut poses = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| format!("line {}: bad number '{t}'", k + 1))
            })
            .collect::<Result<_, _>>()?;
        match format {
            TrajectoryFormat::Tum => {
                let [t, x, y, z, qx, qy, qz, qw] = vals[..] else {
                    return Err(format!("line {}: expected 8 values", k + 1));
                };
                let q = Quaternion::new(qw, qx, qy, qz);
                if !(q.norm() > 0.0) {
                    return Err(format!("line {}: zero quaternion", k + 1));
                }
                times.push(t);
                poses.push(SE3Pose::from_quaternion(
                    &UnitQuaternion::from_quaternion(q),
                    Vec3::new(x, y, z),
                ));
            }
            TrajectoryFormat::Kitti => {
                if vals.len() != 12 {
                    return Err(format!("line {}: expected 12 values", k + 1));
                }
                let r = Matrix3::from_fn(|i, j| vals[4 * i + j]);
                let tr = Vec3::new(vals[3], vals[7], vals[11]);
                times.push(times.len() as f64);
                poses.push(SE3Pose::new(r, tr).orthonormalized());
            }
        }
    }
    Trajectory::new(times, poses).map_err(|e| e.to_string())
}

pub fn load_trajectory(path: &Path, format: TrajectoryFormat) -> Result<Trajectory, IoError> {
    let bytes = read(path)?;
    parse_trajectory(&String::from_utf8_lossy(&bytes), format).map_err(|m| format_err(path, m))
}

const MODEL_MAGIC: &[u8; 4] = b"SPLT";
const MODEL_VERSION: u32 = 1;
const ASCII_MODEL_HEADER: &str = "splatmap-model";

fn splat_values(s: &Splat) -> [f64; 12] {
    let (c, a, b) = (s.centroid, s.tangent_alpha, s.tangent_beta);
    [
        c.x,
        c.y,
        c.z,
        a.x,
        a.y,
        a.z,
        b.x,
        b.y,
        b.z,
        s.log_scale.x,
        s.log_scale.y,
        s.logit_opacity,
    ]
}

fn splat_from_values(v: &[f64]) -> Splat {
    Splat {
        centroid: Vec3::new(v[0], v[1], v[2]),
        tangent_alpha: Vec3::new(v[3], v[4], v[5]),
        tangent_beta: Vec3::new(v[6], v[7], v[8]),
        log_scale: nalgebra::Vector2::new(v[9], v[10]),
        logit_opacity: v[11],
    }
}

/// Binary layout, little endian: magic `SPLT`, u32 version, u64 count, then
/// per splat twelve f64 (centroid, both tangents, log-scales, logit-opacity)
/// and a u32 epoch.
pub fn encode_model(model: &SplatModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.len() * 100);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.len() as u64).to_le_bytes());
    for (s, e) in model.splats.iter().zip(&model.epoch) {
        for v in splat_values(s) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&e.to_le_bytes());
    }
    out
}

/// One header line, a count line, then one line of twelve values and the
/// epoch per splat.
pub fn encode_model_ascii(model: &SplatModel) -> String {
    let mut out = format!(
        "{ASCII_MODEL_HEADER} {MODEL_VERSION}\ncount {}\n",
        model.len()
    );
    for (s, e) in model.splats.iter().zip(&model.epoch) {
        let vals: Vec<String> = splat_values(s).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{} {e}", vals.join(" "));
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<SplatModel, String> {
    if bytes.starts_with(MODEL_MAGIC) {
        if bytes.len() < 16 {
            return Err("truncated header".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(format!("unsupported model version {version}"));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        const RECORD: usize = 12 * 8 + 4;
        let body = &bytes[16..];
        if body.len() != count.checked_mul(RECORD).ok_or("bad count")? {
            return Err("truncated or oversized body".into());
        }
        let mut model = SplatModel::new();
        for rec in body.chunks_exact(RECORD) {
            let vals: Vec<f64> = rec[..96]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let epoch = u32::from_le_bytes(rec[96..].try_into().unwrap());
            model.push(splat_from_values(&vals), epoch);
        }
        return Ok(model);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| "not a model file")?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != format!("{ASCII_MODEL_HEADER} {MODEL_VERSION}") {
        return Err("not a model file".into());
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("count "))
        .and_then(|c| c.trim().parse().ok())
        .ok_or("missing count line")?;
    let mut model = SplatModel::new();
    for (k, line) in lines.enumerate() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.is_empty() {
            continue;
        }
        if tok.len() != 13 {
            return Err(format!("splat {k}: expected 13 values"));
        }
        let vals: Vec<f64> = tok[..12]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("splat {k}: bad number"))?;
        let epoch: u32 = tok[12]
            .parse()
            .map_err(|_| format!("splat {k}: bad epoch"))?;
        model.push(splat_from_values(&vals), epoch);
    }
    if model.len() != count {
        return Err(format!("expected {count} splats, found {}", model.len()));
    }
    Ok(model)
}

pub fn save_model(model: &SplatModel, path: &Path, ascii: bool) -> Result<(), IoError> {
    if ascii {
        write(path, encode_model_ascii(model).as_bytes())
    } else {
        write(path, &encode_model(model))
    }
}

pub fn load_model(path: &Path) -> Result<SplatModel, IoError> {
    decode_model(&read(path)?).map_err(|m| format_err(path, m))
}

/// Single-channel PFM with rows stored bottom to top.
pub fn encode_pfm(image: &Grid<f64>) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    for r in (0..image.height).rev() {
        for c in 0..image.width {
            out.extend_from_slice(&(*image.get(r, c) as f32).to_le_bytes());
        }
    }
    out
}

/// Three-channel PFM.
pub fn encode_pfm_rgb(image: &Grid<Vec3>) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    for r in (0..image.height).rev() {
        for c in 0..image.width {
            for v in image.get(r, c).iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn write_pfm(path: &Path, image: &Grid<f64>) -> Result<(), IoError> {
    write(path, &encode_pfm(image))
}

pub fn write_pfm_rgb(path: &Path, image: &Grid<Vec3>) -> Result<(), IoError> {
    write(path, &encode_pfm_rgb(image))
}

/// Reads a single-channel PFM back into a grid.
pub fn decode_pfm(bytes: &[u8]) -> Result<Grid<f64>, String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err("only single-channel maps are supported".into());
    }
    let w: usize = fields[1].parse().map_err(|_| "bad width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad height")?;
    let scale: f64 = fields[3].parse().map_err(|_| "bad scale")?;
    let body = bytes.get(pos..).ok_or("truncated body")?;
    if body.len() < w * h * 4 {
        return Err("truncated body".into());
    }
    let mut grid = Grid::filled(w, h, 0.0);
    for (k, b) in body.chunks_exact(4).take(w * h).enumerate() {
        let a: [u8; 4] = b.try_into().unwrap();
        let v = if scale < 0.0 {
            f32::from_le_bytes(a)
        } else {
            f32::from_be_bytes(a)
        };
        let (r, c) = (h - 1 - k / w, k % w);
        *grid.get_mut(r, c) = v as f64;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_tum_line() {
        let traj = Trajectory::new(vec![0.0], vec![SE3Pose::identity()]).unwrap();
        assert_eq!(
            format_trajectory(&traj, TrajectoryFormat::Tum),
            "0 0 0 0 0 0 0 1\n"
        );
    }

    #[test]
    fn ascii_model_round_trip() {
        let mut m = SplatModel::new();
        m.push(
            Splat::facing(
                Vec3::new(1.0, -2.0, 0.5),
                Vec3::new(0.2, 0.3, 1.0),
                nalgebra::Vector2::new(0.1, 0.3),
                0.7,
            ),
            3,
        );
        let back = decode_model(encode_model_ascii(&m).as_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(decode_model(&encode_model(&m)).unwrap(), m);
    }

    #[test]
    fn pfm_round_trip() {
        let mut g = Grid::filled(3, 2, 0.0);
        for (k, v) in g.data.iter_mut().enumerate() {
            *v = k as f64 * 0.5;
        }
        assert_eq!(decode_pfm(&encode_pfm(&g)).unwrap(), g);
    }
}
