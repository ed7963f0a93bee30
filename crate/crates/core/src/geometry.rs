//! Geometric primitives shared by the whole pipeline: points, clouds,
//! spherical coordinates, camera calibration and frustum cropping.
//!
//! Frames follow the usual automotive convention: the scanner frame is z-up
//! with x forward, the camera frame is z-forward with y down. A calibration
//! maps scanner points into the image via `p2 * r0_rect * tr_velo_to_cam`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("direction is undefined for the zero vector")]
    UndefinedDirection,
    #[error("point has non-positive camera depth {depth}")]
    BehindCamera { depth: f64 },
    #[error("operation requires a non-empty point cloud")]
    EmptyCloud,
    #[error("intensity count {got} does not match point count {expect}")]
    IntensityMismatch { got: usize, expect: usize },
    #[error("intensity {value} outside [0, 1]")]
    IntensityRange { value: f64 },
    #[error("non-finite coordinate ({x}, {y}, {z})")]
    NonFinite { x: f64, y: f64, z: f64 },
    #[error("calibration rotation is not orthonormal (max deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Point3 {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn add(&self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(&self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(&self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(&self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn dist2(&self, o: Point3) -> f64 {
        self.sub(o).dot(self.sub(o))
    }

    pub fn dist(&self, o: Point3) -> f64 {
        self.dist2(o).sqrt()
    }
}

/// Point cloud with optional per-point intensity. The intensity vector, when
/// present, always has exactly one entry per point; constructors enforce it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<PointCloud, GeometryError> {
        for p in &points {
            if !p.is_finite() {
                return Err(GeometryError::NonFinite { x: p.x, y: p.y, z: p.z });
            }
        }
        Ok(PointCloud { points, intensity: None })
    }

    pub fn with_intensity(
        points: Vec<Point3>,
        intensity: Vec<f64>,
    ) -> Result<PointCloud, GeometryError> {
        if intensity.len() != points.len() {
            return Err(GeometryError::IntensityMismatch {
                got: intensity.len(),
                expect: points.len(),
            });
        }
        for &v in &intensity {
            if !(0.0..=1.0).contains(&v) {
                return Err(GeometryError::IntensityRange { value: v });
            }
        }
        let mut cloud = PointCloud::new(points)?;
        cloud.intensity = Some(intensity);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    /// Sub-cloud at `indices` (in the given order), carrying intensity along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let intensity = self
            .intensity
            .as_ref()
            .map(|w| indices.iter().map(|&i| w[i]).collect());
        PointCloud { points, intensity }
    }
}

/// Range in meters, angles in degrees: azimuth in [0, 360) counterclockwise
/// from +x, elevation in [-90, 90] from the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    pub range: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

pub fn cart_to_spherical(p: Point3) -> Result<SphericalCoord, GeometryError> {
    let range = p.norm();
    if range == 0.0 {
        return Err(GeometryError::UndefinedDirection);
    }
    let mut azimuth_deg = p.y.atan2(p.x).to_degrees();
    if azimuth_deg < 0.0 {
        azimuth_deg += 360.0;
    }
    // 360 - tiny rounds up to exactly 360.0; fold it back onto 0.
    if azimuth_deg >= 360.0 {
        azimuth_deg = 0.0;
    }
    let horiz = (p.x * p.x + p.y * p.y).sqrt();
    let elevation_deg = p.z.atan2(horiz).to_degrees();
    Ok(SphericalCoord { range, azimuth_deg, elevation_deg })
}

pub fn spherical_to_cart(s: SphericalCoord) -> Point3 {
    let az = s.azimuth_deg.to_radians();
    let el = s.elevation_deg.to_radians();
    let horiz = s.range * el.cos();
    Point3::new(horiz * az.cos(), horiz * az.sin(), s.range * el.sin())
}

/// Pinhole projection chain `p2 * r0_rect * tr_velo_to_cam`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    pub p2: [[f64; 4]; 3],
    pub r0_rect: [[f64; 3]; 3],
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

fn rotation_deviation(r: &[[f64; 3]; 3]) -> f64 {
    // max |R R^T - I| entry
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += r[i][k] * r[j][k];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((s - target).abs());
        }
    }
    dev
}

impl CameraCalibration {
    pub const ORTHONORMAL_TOL: f64 = 1e-3;

    pub fn new(
        p2: [[f64; 4]; 3],
        r0_rect: [[f64; 3]; 3],
        tr_velo_to_cam: [[f64; 4]; 3],
    ) -> Result<CameraCalibration, GeometryError> {
        let dev_r0 = rotation_deviation(&r0_rect);
        let tr_rot = [
            [tr_velo_to_cam[0][0], tr_velo_to_cam[0][1], tr_velo_to_cam[0][2]],
            [tr_velo_to_cam[1][0], tr_velo_to_cam[1][1], tr_velo_to_cam[1][2]],
            [tr_velo_to_cam[2][0], tr_velo_to_cam[2][1], tr_velo_to_cam[2][2]],
        ];
        let dev_tr = rotation_deviation(&tr_rot);
        let deviation = dev_r0.max(dev_tr);
        if deviation > Self::ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal { deviation });
        }
        Ok(CameraCalibration { p2, r0_rect, tr_velo_to_cam })
    }

    /// Identity intrinsics and extrinsics; useful for tests and synthetic rigs.
    pub fn identity() -> CameraCalibration {
        CameraCalibration {
            p2: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    /// Projects a scanner-frame point to pixel coordinates and camera depth.
    /// Fails when the point is on or behind the camera plane.
    pub fn project(&self, p: Point3) -> Result<(f64, f64, f64), GeometryError> {
        let v = [p.x, p.y, p.z, 1.0];
        let mut cam = [0.0f64; 3];
        for i in 0..3 {
            cam[i] = (0..4).map(|j| self.tr_velo_to_cam[i][j] * v[j]).sum();
        }
        let mut rect = [0.0f64; 3];
        for i in 0..3 {
            rect[i] = (0..3).map(|j| self.r0_rect[i][j] * cam[j]).sum();
        }
        let h = [rect[0], rect[1], rect[2], 1.0];
        let mut img = [0.0f64; 3];
        for i in 0..3 {
            img[i] = (0..4).map(|j| self.p2[i][j] * h[j]).sum();
        }
        let depth = img[2];
        if depth <= 0.0 {
            return Err(GeometryError::BehindCamera { depth });
        }
        Ok((img[0] / depth, img[1] / depth, depth))
    }
}

/// Keeps the points that project inside a `width` x `height` image with
/// positive depth. Order and intensity are preserved.
pub fn frustum_crop(
    cloud: &PointCloud,
    calib: &CameraCalibration,
    width: usize,
    height: usize,
) -> PointCloud {
    let mut kept = Vec::new();
    for (i, &p) in cloud.points().iter().enumerate() {
        if let Ok((u, v, _)) = calib.project(p) {
            if u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64 {
                kept.push(i);
            }
        }
    }
    cloud.select(&kept)
}

/// Diagonal of the axis-aligned bounding box of the cloud.
pub fn bounding_diagonal(cloud: &PointCloud) -> Result<f64, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in cloud.points() {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        lo.z = lo.z.min(p.z);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
        hi.z = hi.z.max(p.z);
    }
    Ok(hi.dist(lo))
}

/// Box with center, size and yaw about +z (counterclockwise, radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3D {
    pub center: Point3,
    /// Extent along the heading axis.
    pub length: f64,
    /// Extent across the heading axis.
    pub width: f64,
    /// Vertical extent.
    pub height: f64,
    pub yaw: f64,
}

impl OrientedBox3D {
    /// Ground-plane corners (x, y), counterclockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        let mut out = [(0.0, 0.0); 4];
        for (i, (lx, ly)) in local.into_iter().enumerate() {
            out[i] = (
                self.center.x + c * lx - s * ly,
                self.center.y + s * lx + c * ly,
            );
        }
        out
    }

    pub fn z_interval(&self) -> (f64, f64) {
        (self.center.z - self.height / 2.0, self.center.z + self.height / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }
}
