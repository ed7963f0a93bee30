//! Query selection on the sparse cloud and ground-truth group extraction
//! around each query on the dense cloud.
//!
//! Groups are normalized to the query-centered ball: `(p - query) / radius`,
//! so every coordinate of a stored group lies in `[-1, 1]`. Short groups are
//! padded by resampling their own members with replacement; `valid_count`
//! records how many entries are distinct originals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};
use crate::spatial::VoxelGrid;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("cannot draw {want} queries from {have} points")]
    InsufficientPoints { have: usize, want: usize },
    #[error("start index {start} out of range for {len} points")]
    StartIndexOutOfRange { start: usize, len: usize },
    #[error("no dense points within radius {radius} of query ({x:.3}, {y:.3}, {z:.3})")]
    EmptyNeighborhood { x: f64, y: f64, z: f64, radius: f64 },
    #[error("group size k must be positive")]
    ZeroGroupSize,
    #[error("neighborhood radius must be positive, got {0}")]
    BadRadius(f64),
}

/// Queries picked from a source cloud, with their source indices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Point3>,
    pub source_indices: Vec<usize>,
}

/// One query with its normalized ground-truth neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroupPair {
    pub query: Point3,
    /// Exactly `k` points, each coordinate in [-1, 1].
    pub group: Vec<Point3>,
    /// How many entries are distinct dense points (the rest are pad copies).
    pub valid_count: usize,
}

/// Greedy farthest point sampling: repeatedly takes the point with the
/// largest distance to the already selected set, ties to the lowest index.
pub fn farthest_point_sampling(
    cloud: &PointCloud,
    n: usize,
    start_index: usize,
) -> Result<QuerySet, SampleError> {
    let pts = cloud.points();
    if n > pts.len() {
        return Err(SampleError::InsufficientPoints { have: pts.len(), want: n });
    }
    if start_index >= pts.len() {
        return Err(SampleError::StartIndexOutOfRange { start: start_index, len: pts.len() });
    }
    let mut selected = Vec::with_capacity(n);
    let mut in_set = vec![false; pts.len()];
    // min squared distance from each point to the selected set
    let mut min_d2 = vec![f64::INFINITY; pts.len()];
    let mut last = start_index;
    if n > 0 {
        selected.push(start_index);
        in_set[start_index] = true;
    }
    while selected.len() < n {
        let lp = pts[last];
        let mut best: Option<(f64, usize)> = None;
        for i in 0..pts.len() {
            if !in_set[i] {
                let d2 = pts[i].dist2(lp);
                if d2 < min_d2[i] {
                    min_d2[i] = d2;
                }
                match best {
                    Some((bd, _)) if min_d2[i] <= bd => {}
                    _ => best = Some((min_d2[i], i)),
                }
            }
        }
        let (_, pick) = best.expect("n <= len guarantees a candidate");
        selected.push(pick);
        in_set[pick] = true;
        last = pick;
    }
    Ok(QuerySet {
        queries: selected.iter().map(|&i| pts[i]).collect(),
        source_indices: selected,
    })
}

/// Uniform sample of `n` distinct indices, order of selection.
pub fn random_point_sampling(
    cloud: &PointCloud,
    n: usize,
    seed: u64,
) -> Result<QuerySet, SampleError> {
    let pts = cloud.points();
    if n > pts.len() {
        return Err(SampleError::InsufficientPoints { have: pts.len(), want: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = sample_without_replacement(pts.len(), n, &mut rng);
    Ok(QuerySet {
        queries: indices.iter().map(|&i| pts[i]).collect(),
        source_indices: indices,
    })
}

/// Partial Fisher-Yates: first `n` entries of a shuffle of `0..len`.
fn sample_without_replacement(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Extracts the normalized neighborhood of one query from the dense cloud.
/// Builds a throwaway index; use [`extract_groups`] for many queries.
pub fn extract_group(
    dense: &PointCloud,
    query: Point3,
    k: usize,
    radius: f64,
    seed: u64,
) -> Result<QueryGroupPair, SampleError> {
    let grid = VoxelGrid::build(dense.points(), radius.max(1e-9));
    extract_group_indexed(&grid, query, k, radius, seed)
}

/// Group extraction against a prebuilt index over the dense cloud.
pub fn extract_group_indexed(
    grid: &VoxelGrid,
    query: Point3,
    k: usize,
    radius: f64,
    seed: u64,
) -> Result<QueryGroupPair, SampleError> {
    if k == 0 {
        return Err(SampleError::ZeroGroupSize);
    }
    if !(radius > 0.0) {
        return Err(SampleError::BadRadius(radius));
    }
    let hood = grid.radius_indices(query, radius);
    if hood.is_empty() {
        return Err(SampleError::EmptyNeighborhood {
            x: query.x,
            y: query.y,
            z: query.z,
            radius,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = grid.points();
    let mut group: Vec<Point3> = if hood.len() > k {
        let picks = sample_without_replacement(hood.len(), k, &mut rng);
        picks.into_iter().map(|j| pts[hood[j]]).collect()
    } else {
        hood.iter().map(|&i| pts[i]).collect()
    };
    let valid_count = group.len();
    while group.len() < k {
        let j = rng.gen_range(0..valid_count);
        group.push(group[j]);
    }
    for p in &mut group {
        *p = p.sub(query).scale(1.0 / radius);
    }
    Ok(QueryGroupPair { query, group, valid_count })
}

/// Extracts groups for every query over one shared index. Queries with an
/// empty neighborhood are skipped; their query-set positions are returned
/// separately so callers can report them.
pub fn extract_groups(
    dense: &PointCloud,
    queries: &[Point3],
    k: usize,
    radius: f64,
    seed: u64,
) -> Result<(Vec<QueryGroupPair>, Vec<usize>), SampleError> {
    if k == 0 {
        return Err(SampleError::ZeroGroupSize);
    }
    if !(radius > 0.0) {
        return Err(SampleError::BadRadius(radius));
    }
    let grid = VoxelGrid::build(dense.points(), radius.max(1e-9));
    let mut pairs = Vec::with_capacity(queries.len());
    let mut skipped = Vec::new();
    for (qi, &q) in queries.iter().enumerate() {
        // Per-query seed keeps any one group reproducible in isolation.
        match extract_group_indexed(&grid, q, k, radius, seed.wrapping_add(qi as u64)) {
            Ok(pair) => pairs.push(pair),
            Err(SampleError::EmptyNeighborhood { .. }) => skipped.push(qi),
            Err(e) => return Err(e),
        }
    }
    Ok((pairs, skipped))
}

/// Maps a normalized group entry back to scene coordinates.
pub fn denormalize(p: Point3, query: Point3, radius: f64) -> Point3 {
    query.add(p.scale(radius))
}
