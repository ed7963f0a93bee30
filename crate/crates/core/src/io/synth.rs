//! Deterministic synthetic scenes: boxes and spheres on a ground plane,
//! swept by the default 64-beam scanner and rendered to an inverse-depth
//! camera image. A stand-in for real drive data in tests and small training
//! runs.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{IoError, Scene};
use crate::geometry::{
    spherical_to_cart, CameraCalibration, OrientedBox3D, Point3, PointCloud, SphericalCoord,
};
use crate::lidar::LidarSpec;
use crate::nn::Tensor;

/// Returns beyond this range are dropped, matching the sensor's reach.
pub const MAX_RANGE_M: f64 = 120.0;
/// Depth mapped to full brightness in rendered images.
pub const Z_NEAR_M: f64 = 3.0;

pub const GROUND_INTENSITY: f64 = 0.3;
pub const BOX_INTENSITY: f64 = 0.8;
pub const SPHERE_INTENSITY: f64 = 0.6;

const T_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Box,
    Sphere,
}

/// Recipe for a generated scene. The scanner sits at the origin; the ground
/// plane must be below it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_objects: usize,
    /// Kinds drawn uniformly; must be non-empty when `n_objects > 0`.
    pub kinds: Vec<ObjectKind>,
    /// Forward placement band, meters.
    pub x_range: (f64, f64),
    /// Lateral placement band, meters.
    pub y_range: (f64, f64),
    /// Object extent band, meters.
    pub size_range: (f64, f64),
    pub ground_z: f64,
    pub image_w: usize,
    pub image_h: usize,
    pub focal_px: f64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            seed: 0,
            n_objects: 6,
            kinds: vec![ObjectKind::Box, ObjectKind::Sphere],
            x_range: (5.0, 40.0),
            y_range: (-15.0, 15.0),
            size_range: (0.5, 3.0),
            ground_z: -1.73,
            image_w: 128,
            image_h: 64,
            focal_px: 60.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), IoError> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(IoError::Spec("image dimensions must be positive".into()));
        }
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return Err(IoError::Spec(format!("focal length {} must be positive", self.focal_px)));
        }
        if !(self.ground_z.is_finite() && self.ground_z < 0.0) {
            return Err(IoError::Spec(format!(
                "ground height {} must be below the sensor at z = 0",
                self.ground_z
            )));
        }
        for (name, (lo, hi)) in
            [("x", self.x_range), ("y", self.y_range), ("size", self.size_range)]
        {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(IoError::Spec(format!("{name} range [{lo}, {hi}] is degenerate")));
            }
        }
        if self.size_range.0 <= 0.0 {
            return Err(IoError::Spec("object sizes must be positive".into()));
        }
        if self.n_objects > 0 && self.kinds.is_empty() {
            return Err(IoError::Spec("no object kinds to draw from".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthObject {
    Box(OrientedBox3D),
    Sphere { center: Point3, radius: f64 },
}

impl SynthObject {
    /// Object bounds for labels; spheres get their bounding cube.
    pub fn bounds(&self) -> OrientedBox3D {
        match self {
            SynthObject::Box(b) => *b,
            SynthObject::Sphere { center, radius } => OrientedBox3D {
                center: *center,
                length: 2.0 * radius,
                width: 2.0 * radius,
                height: 2.0 * radius,
                yaw: 0.0,
            },
        }
    }

    pub fn class_name(&self) -> &'static str {
        match self {
            SynthObject::Box(_) => "Box",
            SynthObject::Sphere { .. } => "Sphere",
        }
    }
}

/// Draws object placements. Every object rests on the ground plane. The draw
/// order per object (kind, x, y, dims) is fixed; changing it would silently
/// reshuffle every seeded dataset.
pub fn place_objects(spec: &SynthSpec) -> Result<Vec<SynthObject>, IoError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut objects = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
        let x = rng.gen_range(spec.x_range.0..spec.x_range.1);
        let y = rng.gen_range(spec.y_range.0..spec.y_range.1);
        let (lo, hi) = spec.size_range;
        match kind {
            ObjectKind::Box => {
                let length = rng.gen_range(lo..hi);
                let width = rng.gen_range(lo..hi);
                let height = rng.gen_range(lo..hi);
                let yaw = rng.gen_range(0.0..TAU);
                objects.push(SynthObject::Box(OrientedBox3D {
                    center: Point3::new(x, y, spec.ground_z + height / 2.0),
                    length,
                    width,
                    height,
                    yaw,
                }));
            }
            ObjectKind::Sphere => {
                let radius = rng.gen_range(lo..hi) / 2.0;
                objects.push(SynthObject::Sphere {
                    center: Point3::new(x, y, spec.ground_z + radius),
                    radius,
                });
            }
        }
    }
    Ok(objects)
}

fn ray_ground(origin: Point3, dir: Point3, ground_z: f64) -> Option<f64> {
    if dir.z >= -1e-12 {
        return None;
    }
    let t = (ground_z - origin.z) / dir.z;
    (t > T_EPS).then_some(t)
}

fn ray_box(origin: Point3, dir: Point3, b: &OrientedBox3D) -> Option<f64> {
    // Slab test in the box frame. The scanner sits outside every object, so
    // only the entry point matters.
    let (s, c) = b.yaw.sin_cos();
    let o = origin.sub(b.center);
    let os = [c * o.x + s * o.y, -s * o.x + c * o.y, o.z];
    let ds = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
    let half = [b.length / 2.0, b.width / 2.0, b.height / 2.0];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        if ds[a].abs() < 1e-12 {
            if os[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t1 = (-half[a] - os[a]) / ds[a];
        let t2 = (half[a] - os[a]) / ds[a];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
    }
    (t_enter > T_EPS && t_enter <= t_exit).then_some(t_enter)
}

fn ray_sphere(origin: Point3, dir: Point3, center: Point3, radius: f64) -> Option<f64> {
    let oc = origin.sub(center);
    let b = 2.0 * dir.dot(oc);
    let disc = b * b - 4.0 * (oc.dot(oc) - radius * radius);
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / 2.0;
    (t > T_EPS).then_some(t)
}

struct Hit {
    t: f64,
    intensity: f64,
}

fn cast_ray(origin: Point3, dir: Point3, ground_z: f64, objects: &[SynthObject]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: Option<f64>, intensity: f64| {
        if let Some(t) = t {
            if t <= MAX_RANGE_M && best.as_ref().is_none_or(|h| t < h.t) {
                best = Some(Hit { t, intensity });
            }
        }
    };
    consider(ray_ground(origin, dir, ground_z), GROUND_INTENSITY);
    for obj in objects {
        match obj {
            SynthObject::Box(b) => consider(ray_box(origin, dir, b), BOX_INTENSITY),
            SynthObject::Sphere { center, radius } => {
                consider(ray_sphere(origin, dir, *center, *radius), SPHERE_INTENSITY)
            }
        }
    }
    best
}

/// Pinhole calibration for the render camera: principal point at the image
/// center, axis permutation x_cam = -y, y_cam = -z, z_cam = x, no offset.
pub fn synth_calib(spec: &SynthSpec) -> CameraCalibration {
    let f = spec.focal_px;
    let cx = spec.image_w as f64 / 2.0;
    let cy = spec.image_h as f64 / 2.0;
    let p2 = [[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]];
    let r0 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let tr = [
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ];
    CameraCalibration::new(p2, r0, tr).expect("axis permutation is orthonormal")
}

/// Inverse-depth render: brightness `Z_NEAR_M / depth` clamped to 1, misses
/// black. Pixel rays match `synth_calib`, so projecting a hit lands on the
/// pixel center.
fn render_depth_image(spec: &SynthSpec, objects: &[SynthObject]) -> Tensor {
    let (w, h) = (spec.image_w, spec.image_h);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut image = Tensor::zeros(&[1, h, w]);
    let px = image.data_mut();
    for v in 0..h {
        for u in 0..w {
            let dy = -((u as f64 + 0.5) - cx) / spec.focal_px;
            let dz = -((v as f64 + 0.5) - cy) / spec.focal_px;
            let norm = (1.0 + dy * dy + dz * dz).sqrt();
            let dir = Point3::new(1.0 / norm, dy / norm, dz / norm);
            if let Some(hit) = cast_ray(Point3::ORIGIN, dir, spec.ground_z, objects) {
                let depth = hit.t * dir.x;
                px[v * w + u] = (Z_NEAR_M / depth).min(1.0);
            }
        }
    }
    image
}

/// Renders a scene around a fixed object list: one ray per beam and azimuth
/// bin of the default scanner, returns kept within `MAX_RANGE_M`, plus the
/// camera image and object bounds.
pub fn synth_scene_from(spec: &SynthSpec, objects: &[SynthObject]) -> Result<Scene, IoError> {
    spec.validate()?;
    let lidar = LidarSpec::default();
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for beam in 0..lidar.n_beams {
        let elevation_deg = lidar.beam_center_deg(beam);
        for bin in 0..lidar.n_azim_bins() {
            let dir = spherical_to_cart(SphericalCoord {
                range: 1.0,
                azimuth_deg: lidar.azim_center_deg(bin),
                elevation_deg,
            });
            if let Some(hit) = cast_ray(Point3::ORIGIN, dir, spec.ground_z, objects) {
                points.push(dir.scale(hit.t));
                intensity.push(hit.intensity);
            }
        }
    }
    let dense_cloud = PointCloud::with_intensity(points, intensity)?;
    if dense_cloud.is_empty() {
        return Err(IoError::Spec("no returns; ground plane out of range".into()));
    }
    let image = render_depth_image(spec, objects);
    let calib = synth_calib(spec);
    let boxes = objects.iter().map(SynthObject::bounds).collect();
    Ok(Scene {
        image,
        dense_cloud,
        calib,
        boxes: Some(boxes),
        id: format!("{:016x}", spec.seed),
    })
}

/// Places objects from the seed and renders the scene.
pub fn synth_scene(spec: &SynthSpec) -> Result<Scene, IoError> {
    synth_scene_from(spec, &place_objects(spec)?)
}
