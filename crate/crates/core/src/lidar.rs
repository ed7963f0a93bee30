//! Rotating-scanner model: beam/azimuth binning of a dense frame and
//! decimation to a low-resolution frame with measurement noise.
//!
//! A frame is treated as a polar grid: `n_beams` elevation rows spanning
//! `[elev_min, elev_max]` and azimuth columns of `azim_step_deg` degrees.
//! Downsampling keeps every `beam_stride`-th row and `azim_stride`-th column,
//! collapses each kept bin to its nearest return, and perturbs each kept
//! point with independent uniform noise per axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{cart_to_spherical, GeometryError, Point3, PointCloud};

#[derive(Debug, Error)]
pub enum LidarError {
    #[error("point elevation {elevation_deg:.3} deg outside field of view")]
    OutOfFov { elevation_deg: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarSpec {
    pub n_beams: usize,
    pub elev_min_deg: f64,
    pub elev_max_deg: f64,
    pub azim_step_deg: f64,
}

impl Default for LidarSpec {
    fn default() -> LidarSpec {
        LidarSpec {
            n_beams: 64,
            elev_min_deg: -24.8,
            elev_max_deg: 2.0,
            azim_step_deg: 0.08,
        }
    }
}

impl LidarSpec {
    /// Elevation covered by one beam row.
    pub fn beam_width_deg(&self) -> f64 {
        (self.elev_max_deg - self.elev_min_deg) / self.n_beams as f64
    }

    pub fn n_azim_bins(&self) -> usize {
        (360.0 / self.azim_step_deg).ceil() as usize
    }

    /// Elevation at the center of a beam row.
    pub fn beam_center_deg(&self, beam: usize) -> f64 {
        self.elev_min_deg + (beam as f64 + 0.5) * self.beam_width_deg()
    }

    /// Azimuth at the center of a column.
    pub fn azim_center_deg(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.azim_step_deg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleSpec {
    pub beam_stride: usize,
    pub azim_stride: usize,
    /// Half-width of the uniform per-axis perturbation, in meters.
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for DownsampleSpec {
    fn default() -> DownsampleSpec {
        DownsampleSpec { beam_stride: 8, azim_stride: 8, noise_amplitude: 0.01, seed: 0 }
    }
}

/// Maps a point to its `(beam, azimuth bin)` pair. Elevation gets half a beam
/// width of tolerance at both ends of the field of view; inside it the beam
/// index is clamped to the row range.
pub fn assign_bins(p: Point3, spec: &LidarSpec) -> Result<(usize, usize), LidarError> {
    let s = cart_to_spherical(p)?;
    let bw = spec.beam_width_deg();
    if s.elevation_deg < spec.elev_min_deg - bw / 2.0
        || s.elevation_deg > spec.elev_max_deg + bw / 2.0
    {
        return Err(LidarError::OutOfFov { elevation_deg: s.elevation_deg });
    }
    let beam = ((s.elevation_deg - spec.elev_min_deg) / bw).floor() as i64;
    let beam = beam.clamp(0, spec.n_beams as i64 - 1) as usize;
    let azim = (s.azimuth_deg / spec.azim_step_deg).floor() as usize;
    let azim = azim.min(spec.n_azim_bins() - 1);
    Ok((beam, azim))
}

/// Decimates `cloud` to the kept beam rows and azimuth columns, one point per
/// kept bin (the nearest return; ties keep the earliest point), then applies
/// uniform noise. Out-of-view points are dropped silently.
pub fn downsample_frame(
    cloud: &PointCloud,
    lidar: &LidarSpec,
    spec: &DownsampleSpec,
) -> PointCloud {
    let n_azim = lidar.n_azim_bins();
    // beam -> azim -> best (range, index); dense vectors keep order deterministic.
    let kept_beams = (lidar.n_beams + spec.beam_stride - 1) / spec.beam_stride;
    let kept_azims = (n_azim + spec.azim_stride - 1) / spec.azim_stride;
    let mut best: Vec<Option<(f64, usize)>> = vec![None; kept_beams * kept_azims];
    for (i, &p) in cloud.points().iter().enumerate() {
        let Ok((beam, azim)) = assign_bins(p, lidar) else { continue };
        if beam % spec.beam_stride != 0 || azim % spec.azim_stride != 0 {
            continue;
        }
        let slot = (beam / spec.beam_stride) * kept_azims + azim / spec.azim_stride;
        let range = p.norm();
        match &mut best[slot] {
            Some((r, _)) if range >= *r => {}
            entry => *entry = Some((range, i)),
        }
    }
    let mut indices: Vec<usize> = best.into_iter().flatten().map(|(_, i)| i).collect();
    indices.sort_unstable();
    let kept = cloud.select(&indices);
    add_noise(&kept, spec.noise_amplitude, spec.seed)
}

/// Perturbs every coordinate with independent uniform noise in
/// `[-amplitude, amplitude]`. Zero amplitude returns the cloud unchanged.
pub fn add_noise(cloud: &PointCloud, amplitude: f64, seed: u64) -> PointCloud {
    if amplitude == 0.0 {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let dx = rng.gen_range(-amplitude..=amplitude);
            let dy = rng.gen_range(-amplitude..=amplitude);
            let dz = rng.gen_range(-amplitude..=amplitude);
            Point3::new(p.x + dx, p.y + dy, p.z + dz)
        })
        .collect();
    match cloud.intensity() {
        Some(w) => PointCloud::with_intensity(points, w.to_vec())
            .expect("noise preserves cloud shape"),
        None => PointCloud::new(points).expect("noise keeps coordinates finite"),
    }
}
