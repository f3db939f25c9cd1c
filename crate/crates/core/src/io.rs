//! File formats: point clouds (text and XMPC binary), KITTI pose files,
//! 16-bit PGM depth dumps and binary flow dumps.
//!
//! KITTI files hold camera-to-world matrices; they are inverted on the way
//! in and out so that in-memory poses stay world-to-camera.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix3x4;

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::geometry::{PoseSE3, Vec3};
use crate::map::PointCloud;
use crate::render::{DepthMap, FlowField};

pub const CLOUD_MAGIC: &[u8; 4] = b"XMPC";
pub const FLOW_MAGIC: &[u8; 4] = b"XMPF";
pub const FORMAT_VERSION: u32 = 1;
/// Meters per PGM gray level unless overridden.
pub const DEFAULT_DEPTH_SCALE: f64 = 0.005;

fn malformed(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn parse_reals(path: &Path, line_no: usize, line: &str, want: usize) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(path, line_no, format!("not a finite number: {t:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.len() != want {
        return Err(malformed(path, line_no, format!("expected {want} fields, got {}", vals.len())));
    }
    Ok(vals)
}

/// Lines that carry data: skips blanks and `#` comments.
fn data_lines<R: BufRead>(r: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    r.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| {
        l.as_ref()
            .map(|s| {
                let t = s.trim();
                !t.is_empty() && !t.starts_with('#')
            })
            .unwrap_or(true)
    })
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (n, line) in data_lines(BufReader::new(open(path)?)) {
        let v = parse_reals(path, n, &line?, 3)?;
        pts.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(PointCloud::new(pts))
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &cloud.points {
        writeln!(w, "{:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_xmpc(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CLOUD_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(cloud.len() as u64).to_le_bytes())?;
    for p in &cloud.points {
        for c in p.iter() {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_xmpc(path: &Path) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    parse_xmpc(path, &bytes)
}

fn parse_xmpc(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 16 || &bytes[..4] != CLOUD_MAGIC {
        return Err(malformed(path, 0, "missing XMPC header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(malformed(path, 0, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if Some(body.len()) != count.checked_mul(12) {
        return Err(malformed(path, 0, format!("header says {count} points, body has {} bytes", body.len())));
    }
    let f = |i: usize| f32::from_le_bytes(body[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as f64;
    Ok(PointCloud::new((0..count).map(|i| Vec3::new(f(3 * i), f(3 * i + 1), f(3 * i + 2))).collect()))
}

/// Reads either format, chosen by the leading magic bytes.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(CLOUD_MAGIC) {
        return parse_xmpc(path, &bytes);
    }
    let mut pts = Vec::new();
    for (n, line) in data_lines(BufReader::new(bytes.as_slice())) {
        let v = parse_reals(path, n, &line?, 3)?;
        pts.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(PointCloud::new(pts))
}

pub fn parse_kitti<R: Read>(r: R, path: &Path) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (n, line) in data_lines(BufReader::new(r)) {
        let v = parse_reals(path, n, &line?, 12)?;
        let m = Matrix3x4::from_row_slice(&v);
        let r = m.fixed_view::<3, 3>(0, 0);
        if (r.determinant() - 1.0).abs() > 1e-3 {
            return Err(malformed(path, n, "rotation block is not a rotation"));
        }
        poses.push(PoseSE3::from_matrix3x4(&m).inverse());
    }
    Ok(Trajectory::new(poses))
}

pub fn read_kitti(path: &Path) -> Result<Trajectory> {
    parse_kitti(open(path)?, path)
}

pub fn format_kitti<W: Write>(mut w: W, traj: &Trajectory) -> std::io::Result<()> {
    for t in &traj.poses {
        let m = t.inverse().to_matrix3x4();
        let row: Vec<String> = (0..3)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| format!("{:.11e}", m[(i, j)]))
            .collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn write_kitti(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    format_kitti(&mut w, traj)?;
    w.flush()?;
    Ok(())
}

/// 16-bit binary PGM; gray level = depth / scale, 0 where invalid.
pub fn write_depth_pgm(path: &Path, d: &DepthMap, scale: f64) -> Result<()> {
    if !(scale > 0.0) {
        return Err(Error::InvalidResolution(scale));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n# depth_scale {scale:e}\n{} {}\n65535\n", d.width(), d.height())?;
    for (z, &ok) in d.depth.iter().zip(&d.valid) {
        let g = if ok { (z / scale).round().clamp(1.0, 65535.0) as u16 } else { 0 };
        w.write_all(&g.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Depth in meters per pixel (`None` where the gray level is 0) and the
/// dimensions.
pub fn read_depth_pgm(path: &Path) -> Result<(usize, usize, Vec<Option<f64>>)> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    let mut scale = None;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(malformed(path, 0, "truncated PGM header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            let comment = String::from_utf8_lossy(&bytes[pos + 1..end]);
            if let Some(v) = comment.trim().strip_prefix("depth_scale") {
                scale = v.trim().parse::<f64>().ok();
            }
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P5" || tokens[3] != "65535" {
        return Err(malformed(path, 0, "expected 16-bit P5 graymap"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| malformed(path, 0, "bad dimensions"));
    let (w, h) = (dim(&tokens[1])?, dim(&tokens[2])?);
    let scale = scale.unwrap_or(DEFAULT_DEPTH_SCALE);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 2 {
        return Err(malformed(path, 0, "pixel data length does not match dimensions"));
    }
    let depth = body
        .chunks_exact(2)
        .map(|c| {
            let g = u16::from_be_bytes([c[0], c[1]]);
            (g > 0).then_some(g as f64 * scale)
        })
        .collect();
    Ok((w, h, depth))
}

pub fn write_flow(path: &Path, f: &FlowField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FLOW_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(f.width as u32).to_le_bytes())?;
    w.write_all(&(f.height as u32).to_le_bytes())?;
    for plane in [&f.du, &f.dv] {
        for (x, &ok) in plane.iter().zip(&f.valid) {
            let v = if ok { *x as f32 } else { 0.0 };
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for &ok in &f.valid {
        w.write_all(&(if ok { 1.0f32 } else { 0.0 }).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != FLOW_MAGIC {
        return Err(malformed(path, 0, "missing XMPF header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != FORMAT_VERSION {
        return Err(malformed(path, 0, "unsupported version"));
    }
    let (w, h) = (u32_at(8) as usize, u32_at(12) as usize);
    let n = w * h;
    if bytes.len() != 16 + 12 * n {
        return Err(malformed(path, 0, "plane data length does not match dimensions"));
    }
    let f = |i: usize| f32::from_le_bytes(bytes[16 + 4 * i..20 + 4 * i].try_into().expect("4 bytes")) as f64;
    let mut out = FlowField::invalid(w, h);
    for i in 0..n {
        if f(2 * n + i) != 0.0 {
            out.set(i, [f(i), f(n + i)]);
        }
    }
    Ok(out)
}
