//! File formats and dataset layout: scanner frames, calibration text,
//! Netpbm images, ASCII PLY export, and the binary query-group container.
//!
//! Directory layout mirrors the KITTI convention: parallel `velodyne/`,
//! `image_2/`, `calib/`, `label_2/` directories keyed by a shared file stem.
//! Dataset iteration sorts by stem so order never depends on how the OS
//! enumerates a directory.

pub mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::{boxes_from_labels, parse_kitti_labels};
use crate::geometry::{CameraCalibration, GeometryError, OrientedBox3D, Point3, PointCloud};
use crate::nn::Tensor;
use crate::sampling::QueryGroupPair;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {what}", path.display())]
    Format { path: PathBuf, what: String },
    #[error("synthetic scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn bad(path: &Path, what: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), what: what.into() }
}

/// Reads a scanner frame: little-endian f32 quadruples x, y, z, reflectance.
/// Reflectance is kept as intensity. An empty file is an empty cloud.
pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud, IoError> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(bad(path, format!("length {} is not a multiple of 16", bytes.len())));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(points.capacity());
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]) as f64;
        points.push(Point3::new(f(0), f(4), f(8)));
        intensity.push(f(12));
    }
    PointCloud::with_intensity(points, intensity).map_err(|e| bad(path, e.to_string()))
}

/// Writes the same quadruple layout; a cloud without intensity stores zeros.
pub fn write_velodyne_bin(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points().iter().enumerate() {
        let w = cloud.intensity().map_or(0.0, |w| w[i]);
        for v in [p.x, p.y, p.z, w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn rows3(v: &[f64]) -> [[f64; 3]; 3] {
    [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]
}

fn rows4(v: &[f64]) -> [[f64; 4]; 3] {
    [
        [v[0], v[1], v[2], v[3]],
        [v[4], v[5], v[6], v[7]],
        [v[8], v[9], v[10], v[11]],
    ]
}

/// Parses `KEY: floats` calibration text. `P2` (12 floats), `R0_rect` (9) and
/// `Tr_velo_to_cam` (12) are used; other keys are ignored. A missing key falls
/// back to identity with a logged warning.
pub fn read_calib(path: &Path) -> Result<CameraCalibration, IoError> {
    let text = fs::read_to_string(path)?;
    let mut p2: Option<[[f64; 4]; 3]> = None;
    let mut r0: Option<[[f64; 3]; 3]> = None;
    let mut tr: Option<[[f64; 4]; 3]> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            log::warn!("{}: line {} has no key, skipped", path.display(), i + 1);
            continue;
        };
        let key = key.trim();
        let want = match key {
            "P2" => 12,
            "R0_rect" => 9,
            "Tr_velo_to_cam" => 12,
            _ => continue,
        };
        let mut vals = Vec::with_capacity(want);
        for tok in rest.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| bad(path, format!("line {}: {key} has a bad float {tok:?}", i + 1)))?;
            if !v.is_finite() {
                return Err(bad(path, format!("line {}: {key} has a non-finite value", i + 1)));
            }
            vals.push(v);
        }
        if vals.len() != want {
            return Err(bad(
                path,
                format!("line {}: {key} needs {want} floats, got {}", i + 1, vals.len()),
            ));
        }
        match key {
            "P2" => p2 = Some(rows4(&vals)),
            "R0_rect" => r0 = Some(rows3(&vals)),
            _ => tr = Some(rows4(&vals)),
        }
    }
    let id = CameraCalibration::identity();
    for (key, missing) in [("P2", p2.is_none()), ("R0_rect", r0.is_none()), ("Tr_velo_to_cam", tr.is_none())] {
        if missing {
            log::warn!("{}: {key} missing, using identity", path.display());
        }
    }
    CameraCalibration::new(
        p2.unwrap_or(id.p2),
        r0.unwrap_or(id.r0_rect),
        tr.unwrap_or(id.tr_velo_to_cam),
    )
    .map_err(|e| bad(path, e.to_string()))
}

fn push_calib_line(s: &mut String, key: &str, vals: impl Iterator<Item = f64>) {
    s.push_str(key);
    s.push(':');
    for v in vals {
        let _ = write!(s, " {v}");
    }
    s.push('\n');
}

/// Writes calibration in the `KEY: floats` layout `read_calib` accepts.
/// Floats use shortest round-trip formatting, so read-back is bit-exact.
pub fn write_calib(calib: &CameraCalibration, path: &Path) -> Result<(), IoError> {
    let mut s = String::new();
    push_calib_line(&mut s, "P2", calib.p2.iter().flatten().copied());
    push_calib_line(&mut s, "R0_rect", calib.r0_rect.iter().flatten().copied());
    push_calib_line(&mut s, "Tr_velo_to_cam", calib.tr_velo_to_cam.iter().flatten().copied());
    fs::write(path, s)?;
    Ok(())
}

fn header_int(bytes: &[u8], pos: &mut usize) -> Result<usize, String> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    let mut value: usize = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value * 10 + usize::from(b - b'0');
        if value > 1_000_000_000 {
            return Err("header value too large".into());
        }
        *pos += 1;
    }
    if *pos == start {
        return Err("missing header integer".into());
    }
    Ok(value)
}

fn parse_netpbm(bytes: &[u8]) -> Result<Tensor, String> {
    let magic = bytes.get(..2).ok_or("missing magic")?;
    let channels: usize = if magic == b"P5" {
        1
    } else if magic == b"P6" {
        3
    } else {
        return Err(format!("unsupported magic {:?}", String::from_utf8_lossy(magic)));
    };
    let mut pos = 2;
    let width = header_int(bytes, &mut pos)?;
    let height = header_int(bytes, &mut pos)?;
    let maxval = header_int(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("expected whitespace after maxval".into()),
    }
    let wide = maxval > 255;
    let bpp = if wide { 2 } else { 1 };
    let data = &bytes[pos..];
    let need = width * height * channels * bpp;
    if data.len() != need {
        return Err(format!("expected {need} sample bytes, found {}", data.len()));
    }
    let mut t = Tensor::zeros(&[channels, height, width]);
    let out = t.data_mut();
    let scale = 1.0 / maxval as f64;
    for row in 0..height {
        for col in 0..width {
            for ch in 0..channels {
                let s = ((row * width) + col) * channels + ch;
                let v = if wide {
                    u16::from_be_bytes([data[2 * s], data[2 * s + 1]]) as usize
                } else {
                    data[s] as usize
                };
                if v > maxval {
                    return Err(format!("sample {v} exceeds maxval {maxval}"));
                }
                out[ch * height * width + row * width + col] = v as f64 * scale;
            }
        }
    }
    Ok(t)
}

/// Reads binary PGM (`P5`) or PPM (`P6`) into a `[channels, height, width]`
/// tensor scaled to [0, 1]. Samples above 255 use the two-byte big-endian
/// Netpbm encoding.
pub fn read_image(path: &Path) -> Result<Tensor, IoError> {
    let bytes = fs::read(path)?;
    parse_netpbm(&bytes).map_err(|what| bad(path, what))
}

/// Writes a `[1, height, width]` tensor with values in [0, 1] as 8-bit
/// binary PGM.
pub fn write_pgm(image: &Tensor, path: &Path) -> Result<(), IoError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(bad(path, format!("need a [1, h, w] tensor, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in image.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(bad(path, format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

/// ASCII PLY export, one vertex per point, nine decimal places per coordinate.
/// Intensity is not exported.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    let mut s = String::with_capacity(96 + cloud.len() * 40);
    let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in cloud.points() {
        let _ = writeln!(s, "{:.9} {:.9} {:.9}", p.x, p.y, p.z);
    }
    fs::write(path, s)?;
    Ok(())
}

fn parse_ply(text: &str) -> Result<PointCloud, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic".into());
    }
    if lines.next().map(str::trim) != Some("format ascii 1.0") {
        return Err("only format ascii 1.0 is supported".into());
    }
    let mut n: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        let Some(line) = lines.next() else { return Err("header never ends".into()) };
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        if line.is_empty() || line.starts_with("comment") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("element ") {
            let mut it = rest.split_whitespace();
            match (it.next(), it.next()) {
                (Some("vertex"), Some(count)) => {
                    n = Some(count.parse().map_err(|_| format!("bad vertex count {count:?}"))?);
                }
                _ => return Err(format!("unsupported element: {line}")),
            }
        } else if let Some(rest) = line.strip_prefix("property ") {
            let name = rest
                .split_whitespace()
                .nth(1)
                .ok_or_else(|| format!("bad property line: {line}"))?;
            props.push(name.to_string());
        } else {
            return Err(format!("unrecognized header line: {line}"));
        }
    }
    let n = n.ok_or("no vertex element")?;
    if props.len() < 3 || props[0] != "x" || props[1] != "y" || props[2] != "z" {
        return Err(format!("need x y z as the first properties, got {props:?}"));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let Some(line) = lines.next() else {
            return Err(format!("expected {n} vertices, data ends after {}", points.len()));
        };
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != props.len() {
            return Err(format!(
                "vertex line has {} fields, header declares {}",
                vals.len(),
                props.len()
            ));
        }
        let mut c = [0.0f64; 3];
        for (i, slot) in c.iter_mut().enumerate() {
            *slot = vals[i].parse().map_err(|_| format!("bad coordinate {:?}", vals[i]))?;
        }
        points.push(Point3::new(c[0], c[1], c[2]));
    }
    for line in lines {
        if !line.trim().is_empty() {
            return Err("trailing data after the declared vertices".into());
        }
    }
    PointCloud::new(points).map_err(|e| e.to_string())
}

/// Reads the ASCII PLY subset `write_ply` emits: a single vertex element whose
/// first three properties are x, y, z. Extra properties are skipped.
pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let text = fs::read_to_string(path)?;
    parse_ply(&text).map_err(|what| bad(path, what))
}

/// Reads a cloud by extension: `.ply` as ASCII PLY, anything else as a
/// scanner `.bin` frame.
pub fn read_cloud(path: &Path) -> Result<PointCloud, IoError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        read_ply(path)
    } else {
        read_velodyne_bin(path)
    }
}

pub const GROUPS_MAGIC: [u8; 4] = *b"PDGR";

/// Query groups read back from disk. Coordinates pass through f32, so values
/// match what was written to the file, not the original f64 groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFile {
    pub pairs: Vec<QueryGroupPair>,
    pub k: usize,
    pub radius: f64,
}

/// Writes query groups: magic `PDGR`, point count, group size, normalization
/// radius, then per group the query, its valid count and `k` normalized
/// points. All fields little-endian, floats as f32.
pub fn write_groups(pairs: &[QueryGroupPair], radius: f64, path: &Path) -> Result<(), IoError> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(bad(path, format!("radius {radius} must be positive and finite")));
    }
    let k = pairs.first().map_or(0, |p| p.group.len());
    let n = u32::try_from(pairs.len()).map_err(|_| bad(path, "group count exceeds u32"))?;
    let k32 = u32::try_from(k).map_err(|_| bad(path, "group size exceeds u32"))?;
    let mut out = Vec::with_capacity(16 + pairs.len() * (16 + 12 * k));
    out.extend_from_slice(&GROUPS_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&k32.to_le_bytes());
    out.extend_from_slice(&(radius as f32).to_le_bytes());
    for (i, pair) in pairs.iter().enumerate() {
        if pair.group.len() != k {
            return Err(bad(path, format!("group {i} has {} points, expected {k}", pair.group.len())));
        }
        if pair.valid_count == 0 || pair.valid_count > k {
            return Err(bad(path, format!("group {i}: valid count {} outside 1..={k}", pair.valid_count)));
        }
        if !pair.query.is_finite() {
            return Err(bad(path, format!("group {i}: query is not finite")));
        }
        for v in [pair.query.x, pair.query.y, pair.query.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(pair.valid_count as u32).to_le_bytes());
        for p in &pair.group {
            for c in [p.x, p.y, p.z] {
                if !(c.is_finite() && c.abs() <= 1.0) {
                    return Err(bad(path, format!("group {i}: coordinate {c} outside [-1, 1]")));
                }
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_groups(bytes: &[u8]) -> Result<GroupFile, String> {
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    if bytes[..4] != GROUPS_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |off: usize| {
        u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
    };
    let f32_at = |off: usize| {
        f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as f64
    };
    let n = u32_at(4) as usize;
    let k = u32_at(8) as usize;
    let radius = f32_at(12);
    if !(radius.is_finite() && radius > 0.0) {
        return Err(format!("radius {radius} must be positive"));
    }
    if n > 0 && k == 0 {
        return Err("zero group size".into());
    }
    if k > 10_000_000 {
        return Err(format!("implausible group size {k}"));
    }
    let record = 16 + 12 * k;
    let want = n
        .checked_mul(record)
        .and_then(|b| b.checked_add(16))
        .ok_or("size overflow")?;
    if bytes.len() != want {
        return Err(format!("expected {want} bytes for {n} groups of {k}, found {}", bytes.len()));
    }
    let mut pairs = Vec::with_capacity(n);
    for g in 0..n {
        let base = 16 + g * record;
        let query = Point3::new(f32_at(base), f32_at(base + 4), f32_at(base + 8));
        if !query.is_finite() {
            return Err(format!("group {g}: query is not finite"));
        }
        let valid = u32_at(base + 12) as usize;
        if valid == 0 || valid > k {
            return Err(format!("group {g}: valid count {valid} outside 1..={k}"));
        }
        let mut group = Vec::with_capacity(k);
        for j in 0..k {
            let p = base + 16 + 12 * j;
            let pt = Point3::new(f32_at(p), f32_at(p + 4), f32_at(p + 8));
            if !pt.is_finite() || pt.x.abs() > 1.0 || pt.y.abs() > 1.0 || pt.z.abs() > 1.0 {
                return Err(format!("group {g}: point {j} outside the unit cube"));
            }
            group.push(pt);
        }
        pairs.push(QueryGroupPair { query, group, valid_count: valid });
    }
    Ok(GroupFile { pairs, k, radius })
}

/// Reads a `write_groups` container, validating the header and every record.
pub fn read_groups(path: &Path) -> Result<GroupFile, IoError> {
    let bytes = fs::read(path)?;
    parse_groups(&bytes).map_err(|what| bad(path, what))
}

pub const CLOUD_DIR: &str = "velodyne";
pub const IMAGE_DIR: &str = "image_2";
pub const CALIB_DIR: &str = "calib";
pub const LABEL_DIR: &str = "label_2";

/// One dataset entry: camera image, dense scanner frame, calibration and
/// optional object boxes.
#[derive(Debug, Clone)]
pub struct Scene {
    /// `[channels, height, width]`, values in [0, 1].
    pub image: Tensor,
    pub dense_cloud: PointCloud,
    pub calib: CameraCalibration,
    pub boxes: Option<Vec<OrientedBox3D>>,
    pub id: String,
}

/// Scene ids under `root`, sorted: the stems of `velodyne/*.bin`.
pub fn scene_ids(root: &Path) -> Result<Vec<String>, IoError> {
    let dir = root.join(CLOUD_DIR);
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let p = entry?.path();
        if p.extension().is_none_or(|e| e != "bin") {
            continue;
        }
        match p.file_stem().and_then(|s| s.to_str()) {
            Some(stem) => ids.push(stem.to_string()),
            None => log::warn!("{}: non-UTF8 stem, skipped", p.display()),
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads one scene by stem. The image may be `.pgm` or `.ppm`; labels are
/// optional and parsed into boxes when `label_2/<id>.txt` exists.
pub fn load_scene(root: &Path, id: &str) -> Result<Scene, IoError> {
    let cloud_path = root.join(CLOUD_DIR).join(format!("{id}.bin"));
    let dense_cloud = read_velodyne_bin(&cloud_path)?;
    if dense_cloud.is_empty() {
        return Err(bad(&cloud_path, "scene cloud is empty"));
    }
    let pgm = root.join(IMAGE_DIR).join(format!("{id}.pgm"));
    let image_path = if pgm.exists() { pgm } else { root.join(IMAGE_DIR).join(format!("{id}.ppm")) };
    let image = read_image(&image_path)?;
    let calib = read_calib(&root.join(CALIB_DIR).join(format!("{id}.txt")))?;
    let label_path = root.join(LABEL_DIR).join(format!("{id}.txt"));
    let boxes = if label_path.exists() {
        let text = fs::read_to_string(&label_path)?;
        let entries = parse_kitti_labels(&text).map_err(|e| bad(&label_path, e.to_string()))?;
        Some(boxes_from_labels(&entries))
    } else {
        None
    };
    Ok(Scene { image, dense_cloud, calib, boxes, id: id.to_string() })
}

/// Loads every scene under `root` in sorted id order.
pub fn load_dataset(root: &Path) -> Result<Vec<Scene>, IoError> {
    scene_ids(root)?.iter().map(|id| load_scene(root, id)).collect()
}
