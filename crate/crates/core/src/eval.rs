//! Scene reassembly and quality metrics: scene-scale Chamfer distance, PSNR,
//! oriented-box IoU, and average precision for detection scoring.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{bounding_diagonal, GeometryError, OrientedBox3D, Point3, PointCloud};
use crate::nn::Tensor;
use crate::sampling::denormalize;
use crate::spatial::VoxelGrid;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("bad evaluation input: {0}")]
    Data(String),
    #[error("bad label data: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Turns per-query normalized groups `[n, k, 3]` back into one scene cloud:
/// every group point is scaled by the radius and recentered on its query.
/// The result always holds exactly `n * k` points.
pub fn assemble_scene(
    pred_groups: &Tensor,
    queries: &[Point3],
    radius: f64,
) -> Result<PointCloud, EvalError> {
    let (n, k) = match pred_groups.shape() {
        [n, k, 3] => (*n, *k),
        s => return Err(EvalError::Data(format!("groups shaped {s:?}, want [n, k, 3]"))),
    };
    if n != queries.len() {
        return Err(EvalError::Data(format!("{n} groups for {} queries", queries.len())));
    }
    if !(radius > 0.0) {
        return Err(EvalError::Data(format!("radius {radius} must be positive")));
    }
    let mut points = Vec::with_capacity(n * k);
    for (g, q) in queries.iter().enumerate() {
        for p in pred_groups.data()[g * k * 3..(g + 1) * k * 3].chunks_exact(3) {
            points.push(denormalize(Point3::new(p[0], p[1], p[2]), *q, radius));
        }
    }
    Ok(PointCloud::new(points)?)
}

/// Mean squared nearest-neighbor distance in each direction, exact via the
/// voxel grid.
fn directional_means(pred: &PointCloud, gt: &PointCloud) -> Result<(f64, f64), EvalError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let fwd = mean_sq_nn(pred.points(), gt.points());
    let bwd = mean_sq_nn(gt.points(), pred.points());
    Ok((fwd, bwd))
}

fn mean_sq_nn(from: &[Point3], to: &[Point3]) -> f64 {
    let grid = VoxelGrid::build(to, grid_cell(from, to));
    let total: f64 = from
        .iter()
        .map(|&p| grid.nearest(p).expect("target cloud is non-empty").1)
        .sum();
    total / from.len() as f64
}

/// Cell size heuristic: the diagonal of the joint bounding box over the cube
/// root of the target count. Sized from both clouds so no query sits more
/// than a few rings from the data. Exactness never depends on this choice.
fn grid_cell(from: &[Point3], to: &[Point3]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in from.iter().chain(to) {
        for (d, v) in [p.x, p.y, p.z].into_iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    let diag = (0..3).map(|d| (hi[d] - lo[d]).powi(2)).sum::<f64>().sqrt();
    (diag / (to.len() as f64).cbrt()).max(1e-9)
}

/// Scene-scale Chamfer distance: the two directional mean squared
/// nearest-neighbor distances, each averaged by its own set size, summed.
pub fn chamfer_metric(pred: &PointCloud, gt: &PointCloud) -> Result<f64, EvalError> {
    let (fwd, bwd) = directional_means(pred, gt)?;
    Ok(fwd + bwd)
}

/// Peak signal-to-noise ratio in decibels: `10 log10(peak^2 / MSE)` with MSE
/// the average of the two directional means and peak the ground-truth
/// bounding-box diagonal. Identical clouds report `+inf`.
pub fn psnr_metric(pred: &PointCloud, gt: &PointCloud) -> Result<f64, EvalError> {
    let (fwd, bwd) = directional_means(pred, gt)?;
    let peak = bounding_diagonal(gt)?;
    if !(peak > 0.0) {
        return Err(EvalError::Data("ground truth has zero spatial extent".into()));
    }
    let mse = 0.5 * (fwd + bwd);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Reconstruction quality summary. `psnr` is `+inf` for a perfect match,
/// which serializes to JSON `null`.
#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionReport {
    pub chamfer: f64,
    pub psnr: f64,
    pub n_points_pred: usize,
    pub n_points_gt: usize,
}

pub fn reconstruction_report(
    pred: &PointCloud,
    gt: &PointCloud,
) -> Result<ReconstructionReport, EvalError> {
    let (fwd, bwd) = directional_means(pred, gt)?;
    let peak = bounding_diagonal(gt)?;
    if !(peak > 0.0) {
        return Err(EvalError::Data("ground truth has zero spatial extent".into()));
    }
    let mse = 0.5 * (fwd + bwd);
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() };
    Ok(ReconstructionReport {
        chamfer: fwd + bwd,
        psnr,
        n_points_pred: pred.len(),
        n_points_gt: gt.len(),
    })
}

const AREA_EPS: f64 = 1e-9;

/// Volume IoU of two yaw-oriented boxes: ground-plane polygon intersection
/// times vertical overlap, over the union volume.
pub fn iou3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (alo, ahi) = a.z_interval();
    let (blo, bhi) = b.z_interval();
    let dz = ahi.min(bhi) - alo.max(blo);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = convex_intersection_area(&a.bev_corners(), &b.bev_corners());
    if area <= AREA_EPS {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Signed area test: positive when `p` lies left of the directed edge a->b.
fn edge_side(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn edge_intersection(
    p: (f64, f64),
    q: (f64, f64),
    a: (f64, f64),
    b: (f64, f64),
) -> (f64, f64) {
    let dp = edge_side(a, b, p);
    let dq = edge_side(a, b, q);
    let t = dp / (dp - dq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland-Hodgman clip of one convex counterclockwise quad against
/// another, then the shoelace area of what remains.
fn convex_intersection_area(subject: &[(f64, f64); 4], clip: &[(f64, f64); 4]) -> f64 {
    let mut poly: Vec<(f64, f64)> = subject.to_vec();
    for e in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        let a = clip[e];
        let b = clip[(e + 1) % 4];
        let mut kept = Vec::with_capacity(poly.len() + 1);
        for j in 0..poly.len() {
            let cur = poly[j];
            let prev = poly[(j + poly.len() - 1) % poly.len()];
            let cur_in = edge_side(a, b, cur) >= -AREA_EPS;
            let prev_in = edge_side(a, b, prev) >= -AREA_EPS;
            if cur_in {
                if !prev_in {
                    kept.push(edge_intersection(prev, cur, a, b));
                }
                kept.push(cur);
            } else if prev_in {
                kept.push(edge_intersection(prev, cur, a, b));
            }
        }
        poly = kept;
    }
    let mut twice_area = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        twice_area += x0 * y1 - x1 * y0;
    }
    (twice_area / 2.0).abs()
}

/// One scored box from a detector.
#[derive(Debug, Clone)]
pub struct Detection {
    pub box3d: OrientedBox3D,
    pub score: f64,
    pub label: String,
}

impl Detection {
    pub fn new(box3d: OrientedBox3D, score: f64, label: impl Into<String>) -> Result<Detection, EvalError> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(EvalError::Data(format!("score {score} outside [0, 1]")));
        }
        Ok(Detection { box3d, score, label: label.into() })
    }
}

/// 40-point interpolated average precision: detections greedily match the
/// best-IoU unmatched ground truth in descending score order; AP averages the
/// best precision at or beyond each of 40 evenly spaced recall thresholds.
pub fn average_precision(
    detections: &[Detection],
    gts: &[OrientedBox3D],
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::Data("average precision needs ground-truth boxes".into()));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(EvalError::Data(format!("IoU threshold {iou_threshold} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .score
            .partial_cmp(&detections[i].score)
            .expect("scores are validated finite")
            .then(i.cmp(&j))
    });

    let mut matched = vec![false; gts.len()];
    let mut true_positive = Vec::with_capacity(order.len());
    for &i in &order {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = iou3d(&detections[i].box3d, gt);
            if best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        match best {
            Some((iou, g)) if iou >= iou_threshold => {
                matched[g] = true;
                true_positive.push(true);
            }
            _ => true_positive.push(false),
        }
    }

    let n_gt = gts.len() as f64;
    let mut curve = Vec::with_capacity(true_positive.len());
    let mut tp = 0usize;
    for (rank, &hit) in true_positive.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt, tp as f64 / (rank + 1) as f64));
    }

    let mut ap = 0.0;
    for i in 1..=40 {
        let r = i as f64 / 40.0;
        let p = curve
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|&(_, precision)| precision)
            .fold(0.0, f64::max);
        ap += p;
    }
    Ok(ap / 40.0)
}

/// One line of a KITTI-style label or result file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEntry {
    pub class: String,
    pub box3d: OrientedBox3D,
    /// Present in result files (16 fields), absent in label files (15).
    pub score: Option<f64>,
}

/// Parses KITTI-format label text: per line `class truncated occluded alpha
/// bbox(4) h w l x y z yaw [score]`. Box coordinates are read in the sensor
/// frame with `(x, y, z)` the bottom-face center and yaw about +z.
pub fn parse_kitti_labels(text: &str) -> Result<Vec<LabelEntry>, EvalError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 15 && tokens.len() != 16 {
            return Err(EvalError::Format(format!(
                "line {}: {} fields, want 15 or 16",
                ln + 1,
                tokens.len()
            )));
        }
        let mut vals = [0.0f64; 15];
        for (i, tok) in tokens[1..].iter().enumerate() {
            vals[i] = tok.parse::<f64>().map_err(|_| {
                EvalError::Format(format!("line {}: bad number {tok:?}", ln + 1))
            })?;
        }
        let (h, w, l) = (vals[7], vals[8], vals[9]);
        let (x, y, z) = (vals[10], vals[11], vals[12]);
        let yaw = vals[13];
        let score = if tokens.len() == 16 { Some(vals[14]) } else { None };
        out.push(LabelEntry {
            class: tokens[0].to_string(),
            box3d: OrientedBox3D {
                center: Point3::new(x, y, z + h / 2.0),
                length: l,
                width: w,
                height: h,
                yaw,
            },
            score,
        });
    }
    Ok(out)
}

/// Formats one label line in the layout `parse_kitti_labels` reads. Unused
/// KITTI fields (truncation, occlusion, alpha, image bbox) are written as
/// zeros. Floats print in shortest round-trip form.
pub fn format_kitti_label(class: &str, b: &OrientedBox3D, score: Option<f64>) -> String {
    let bottom = b.center.z - b.height / 2.0;
    let mut line = format!(
        "{class} 0 0 0 0 0 0 0 {} {} {} {} {} {} {}",
        b.height, b.width, b.length, b.center.x, b.center.y, bottom, b.yaw
    );
    if let Some(s) = score {
        line.push(' ');
        line.push_str(&s.to_string());
    }
    line
}

/// Ground-truth boxes from parsed labels, skipping `DontCare` entries.
pub fn boxes_from_labels(entries: &[LabelEntry]) -> Vec<OrientedBox3D> {
    entries.iter().filter(|e| e.class != "DontCare").map(|e| e.box3d.clone()).collect()
}

/// Detections from parsed result lines; every non-`DontCare` entry must carry
/// a score.
pub fn detections_from_labels(entries: &[LabelEntry]) -> Result<Vec<Detection>, EvalError> {
    entries
        .iter()
        .filter(|e| e.class != "DontCare")
        .map(|e| {
            let score = e.score.ok_or_else(|| {
                EvalError::Format(format!("{} entry has no score", e.class))
            })?;
            Detection::new(e.box3d.clone(), score, e.class.clone())
        })
        .collect()
}
