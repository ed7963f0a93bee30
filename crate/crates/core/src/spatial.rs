//! Uniform voxel-grid index over a point slice for exact radius and
//! nearest-neighbor queries.
//!
//! Queries are exact: the grid only prunes candidates, every survivor is
//! checked against the true Euclidean distance. Ties on distance resolve to
//! the lowest point index so results never depend on hash iteration order.

use std::collections::HashMap;

use crate::geometry::Point3;

pub struct VoxelGrid<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    key_lo: (i64, i64, i64),
    key_hi: (i64, i64, i64),
}

impl<'a> VoxelGrid<'a> {
    /// Cell edge length is clamped below to keep keys finite.
    pub fn build(points: &'a [Point3], cell: f64) -> VoxelGrid<'a> {
        let cell = cell.max(1e-9);
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = key(*p, cell);
            lo = (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2));
            hi = (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2));
            cells.entry(k).or_default().push(i as u32);
        }
        VoxelGrid { points, cell, cells, key_lo: lo, key_hi: hi }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &'a [Point3] {
        self.points
    }

    /// Indices with `dist(points[i], center) <= radius`, ascending.
    pub fn radius_indices(&self, center: Point3, radius: f64) -> Vec<usize> {
        if self.points.is_empty() || radius < 0.0 {
            return Vec::new();
        }
        let r2 = radius * radius;
        let lo = key(Point3::new(center.x - radius, center.y - radius, center.z - radius), self.cell);
        let hi = key(Point3::new(center.x + radius, center.y + radius, center.z + radius), self.cell);
        let lo = clamp_key(lo, self.key_lo, self.key_hi);
        let hi = clamp_key(hi, self.key_lo, self.key_hi);
        let mut out = Vec::new();
        for kx in lo.0..=hi.0 {
            for ky in lo.1..=hi.1 {
                for kz in lo.2..=hi.2 {
                    if let Some(bucket) = self.cells.get(&(kx, ky, kz)) {
                        for &i in bucket {
                            if self.points[i as usize].dist2(center) <= r2 {
                                out.push(i as usize);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Closest point to `query` as `(index, squared distance)`.
    ///
    /// Scans cells in expanding Chebyshev rings around the query cell. A cell
    /// at ring m holds points at least `(m-1) * cell` away, so the scan stops
    /// as soon as that lower bound strictly exceeds the best distance found;
    /// equality keeps scanning so cross-ring ties still resolve by index.
    pub fn nearest(&self, query: Point3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let center = key(query, self.cell);
        // Rings that can contain data cells, relative to the query cell.
        let ring_min = box_chebyshev_min(center, self.key_lo, self.key_hi);
        let ring_max = box_chebyshev_max(center, self.key_lo, self.key_hi);
        let mut best: Option<(f64, usize)> = None;
        for ring in ring_min..=ring_max {
            if let Some((d2, _)) = best {
                let bound = (ring - 1).max(0) as f64 * self.cell;
                if bound * bound > d2 {
                    break;
                }
            }
            self.scan_ring(center, ring, |i, p| {
                consider(&mut best, p.dist2(query), i);
            });
        }
        best.map(|(d2, i)| (i, d2))
    }

    fn scan_ring(&self, center: (i64, i64, i64), ring: i64, mut f: impl FnMut(usize, Point3)) {
        let mut visit = |k: (i64, i64, i64)| {
            if k.0 < self.key_lo.0 || k.0 > self.key_hi.0
                || k.1 < self.key_lo.1 || k.1 > self.key_hi.1
                || k.2 < self.key_lo.2 || k.2 > self.key_hi.2
            {
                return;
            }
            if let Some(bucket) = self.cells.get(&k) {
                for &i in bucket {
                    f(i as usize, self.points[i as usize]);
                }
            }
        };
        if ring == 0 {
            visit(center);
            return;
        }
        // Iterate only the part of the ring inside the data box. Without the
        // clamp a distant query makes the ring surface astronomically large
        // even when the data occupies one cell.
        let dx_lo = (self.key_lo.0 - center.0).max(-ring);
        let dx_hi = (self.key_hi.0 - center.0).min(ring);
        let dy_lo = (self.key_lo.1 - center.1).max(-ring);
        let dy_hi = (self.key_hi.1 - center.1).min(ring);
        let dz_lo = (self.key_lo.2 - center.2).max(-ring);
        let dz_hi = (self.key_hi.2 - center.2).min(ring);
        for dx in dx_lo..=dx_hi {
            for dy in dy_lo..=dy_hi {
                if dx.abs() == ring || dy.abs() == ring {
                    // Full face slabs at +-ring in x or y.
                    for dz in dz_lo..=dz_hi {
                        visit((center.0 + dx, center.1 + dy, center.2 + dz));
                    }
                } else {
                    // Interior column: only the two z caps are on the ring.
                    visit((center.0 + dx, center.1 + dy, center.2 - ring));
                    visit((center.0 + dx, center.1 + dy, center.2 + ring));
                }
            }
        }
    }
}

fn key(p: Point3, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

fn clamp_key(k: (i64, i64, i64), lo: (i64, i64, i64), hi: (i64, i64, i64)) -> (i64, i64, i64) {
    (k.0.clamp(lo.0, hi.0), k.1.clamp(lo.1, hi.1), k.2.clamp(lo.2, hi.2))
}

/// Chebyshev distance from `k` to the nearest cell of the box, 0 when inside.
fn box_chebyshev_min(k: (i64, i64, i64), lo: (i64, i64, i64), hi: (i64, i64, i64)) -> i64 {
    let dx = (lo.0 - k.0).max(k.0 - hi.0).max(0);
    let dy = (lo.1 - k.1).max(k.1 - hi.1).max(0);
    let dz = (lo.2 - k.2).max(k.2 - hi.2).max(0);
    dx.max(dy).max(dz)
}

/// Chebyshev distance from `k` to the farthest cell of the box.
fn box_chebyshev_max(k: (i64, i64, i64), lo: (i64, i64, i64), hi: (i64, i64, i64)) -> i64 {
    let dx = (k.0 - lo.0).abs().max((k.0 - hi.0).abs());
    let dy = (k.1 - lo.1).abs().max((k.1 - hi.1).abs());
    let dz = (k.2 - lo.2).abs().max((k.2 - hi.2).abs());
    dx.max(dy).max(dz)
}

fn consider(best: &mut Option<(f64, usize)>, d2: f64, i: usize) {
    match best {
        Some((bd, bi)) => {
            if d2 < *bd || (d2 == *bd && i < *bi) {
                *best = Some((d2, i));
            }
        }
        None => *best = Some((d2, i)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_radius(pts: &[Point3], c: Point3, r: f64) -> Vec<usize> {
        (0..pts.len()).filter(|&i| pts[i].dist(c) <= r).collect()
    }

    fn brute_nearest(pts: &[Point3], q: Point3) -> Option<(usize, f64)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in pts.iter().enumerate() {
            consider(&mut best, p.dist2(q), i);
        }
        best.map(|(d2, i)| (i, d2))
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                )
            })
            .collect()
    }

    #[test]
    fn empty_grid_has_no_answers() {
        let grid = VoxelGrid::build(&[], 1.0);
        assert!(grid.nearest(Point3::ORIGIN).is_none());
        assert!(grid.radius_indices(Point3::ORIGIN, 5.0).is_empty());
    }

    #[test]
    fn radius_is_inclusive() {
        let pts = [Point3::new(1.0, 0.0, 0.0), Point3::new(1.0 + 1e-9, 0.0, 0.0)];
        let grid = VoxelGrid::build(&pts, 1.0);
        assert_eq!(grid.radius_indices(Point3::ORIGIN, 1.0), vec![0]);
    }

    #[test]
    fn radius_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let pts = random_cloud(&mut rng, 200, 10.0);
            let cell = rng.gen_range(0.2..3.0);
            let grid = VoxelGrid::build(&pts, cell);
            for _ in 0..5 {
                let c = Point3::new(
                    rng.gen_range(-12.0..12.0),
                    rng.gen_range(-12.0..12.0),
                    rng.gen_range(-12.0..12.0),
                );
                let r = rng.gen_range(0.0..6.0);
                assert_eq!(
                    grid.radius_indices(c, r),
                    brute_radius(&pts, c, r),
                    "trial {trial}"
                );
            }
        }
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..50 {
            let n = rng.gen_range(1..200);
            let pts = random_cloud(&mut rng, n, 8.0);
            let cell = rng.gen_range(0.2..3.0);
            let grid = VoxelGrid::build(&pts, cell);
            for _ in 0..8 {
                let q = Point3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                );
                assert_eq!(grid.nearest(q), brute_nearest(&pts, q), "trial {trial}");
            }
        }
    }

    #[test]
    fn nearest_far_query_still_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = random_cloud(&mut rng, 50, 2.0);
        let grid = VoxelGrid::build(&pts, 0.5);
        for q in [
            Point3::new(500.0, -300.0, 200.0),
            Point3::new(-41.0, 0.0, 0.0),
            Point3::new(40.0, 39.0, -38.5),
        ] {
            assert_eq!(grid.nearest(q), brute_nearest(&pts, q));
        }
    }

    #[test]
    fn nearest_tie_takes_lowest_index() {
        // Two points symmetric about the query, in different cells.
        let pts = [Point3::new(1.5, 0.0, 0.0), Point3::new(-1.5, 0.0, 0.0)];
        let grid = VoxelGrid::build(&pts, 1.0);
        assert_eq!(grid.nearest(Point3::ORIGIN), Some((0, 2.25)));
        let flipped = [pts[1], pts[0]];
        let grid = VoxelGrid::build(&flipped, 1.0);
        assert_eq!(grid.nearest(Point3::ORIGIN), Some((0, 2.25)));
    }

    #[test]
    fn nearest_tie_across_rings() {
        // Dyadic coordinates make both distances exactly 1.25; the lower
        // index lies one Chebyshev ring farther out, so the scan must not
        // stop at the first ring that produced a candidate.
        let q = Point3::new(0.875, 0.125, 0.5);
        let pts = [
            q.add(Point3::new(1.25, 0.0, 0.0)), // ring 3 at cell 0.5
            q.add(Point3::new(0.75, 1.0, 0.0)), // ring 2
        ];
        let grid = VoxelGrid::build(&pts, 0.5);
        assert_eq!(grid.nearest(q), Some((0, 1.5625)));
        assert_eq!(grid.nearest(q), brute_nearest(&pts, q));
    }

    #[test]
    fn duplicate_points_resolve_to_first() {
        let pts = [Point3::new(1.0, 1.0, 1.0); 5];
        let grid = VoxelGrid::build(&pts, 1.0);
        let (i, _) = grid.nearest(Point3::ORIGIN).unwrap();
        assert_eq!(i, 0);
        assert_eq!(grid.radius_indices(Point3::ORIGIN, 2.0), vec![0, 1, 2, 3, 4]);
    }
}
