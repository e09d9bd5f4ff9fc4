//! Pinhole camera math, Amanatides-Woo voxel ray traversal and frustum
//! visibility. Shared by mapping, node evaluation and the renderer.
//!
//! World convention: Z-up, yaw about Z (yaw 0 faces +X), pitch about the
//! camera's lateral axis (positive looks up), roll fixed to zero.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::grid::{GridSpec, VoxelIdx};
use crate::voxel_map::OccupancyState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub horizontal_fov_deg: f64,
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, horizontal_fov_deg: f64) -> Self {
        assert!(width >= 8 && height >= 8, "resolution too small");
        assert!(
            horizontal_fov_deg > 10.0 && horizontal_fov_deg < 170.0,
            "fov out of range"
        );
        Self {
            width,
            height,
            horizontal_fov_deg,
        }
    }

    /// Focal length in pixels (square pixels, fx == fy).
    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.horizontal_fov_deg.to_radians() / 2.0).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

/// Camera viewpoint: position plus yaw/pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewPose {
    pub position: Point3<f64>,
    pub yaw: f64,
    pub pitch: f64,
}

impl ViewPose {
    pub fn new(position: Point3<f64>, yaw: f64, pitch: f64) -> Self {
        assert!(
            pitch >= -std::f64::consts::FRAC_PI_2 - 1e-9
                && pitch <= std::f64::consts::FRAC_PI_2 + 1e-9,
            "pitch out of range"
        );
        Self {
            position,
            yaw,
            pitch,
        }
    }

    pub fn forward(&self) -> Vector3<f64> {
        Vector3::new(
            self.yaw.cos() * self.pitch.cos(),
            self.yaw.sin() * self.pitch.cos(),
            self.pitch.sin(),
        )
    }

    /// Camera right axis in world frame (image +u direction).
    pub fn right(&self) -> Vector3<f64> {
        Vector3::new(self.yaw.sin(), -self.yaw.cos(), 0.0)
    }

    /// Camera up axis in world frame (image -v direction).
    pub fn up(&self) -> Vector3<f64> {
        self.right().cross(&self.forward())
    }

    pub fn is_finite(&self) -> bool {
        self.position.coords.iter().all(|c| c.is_finite()) && self.yaw.is_finite() && self.pitch.is_finite()
    }
}

/// Frustum used for visibility evaluation: camera model, range cap and the
/// pixel stride at which rays are cast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrustumSpec {
    pub intrinsics: CameraIntrinsics,
    pub max_range: f64,
    pub stride: usize,
}

impl FrustumSpec {
    pub fn new(intrinsics: CameraIntrinsics, max_range: f64, stride: usize) -> Self {
        assert!(max_range > 0.0, "max_range must be positive");
        assert!(stride >= 1, "stride must be >= 1");
        Self {
            intrinsics,
            max_range,
            stride,
        }
    }
}

/// Unit ray direction through pixel `(u, v)` for the given pose.
pub fn ray_direction(u: usize, v: usize, intr: &CameraIntrinsics, pose: &ViewPose) -> Vector3<f64> {
    debug_assert!(u < intr.width && v < intr.height);
    let f = intr.focal();
    let (cx, cy) = intr.principal_point();
    let x = (u as f64 + 0.5 - cx) / f;
    let y = (v as f64 + 0.5 - cy) / f;
    (pose.forward() + pose.right() * x - pose.up() * y).normalize()
}

/// Intersect a ray with an axis-aligned box, returning entry/exit parameters.
pub fn ray_box_interval(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    bmin: &Point3<f64>,
    bmax: &Point3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < bmin[a] || origin[a] > bmax[a] {
                return None;
            }
        } else {
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((bmin[a] - origin[a]) * inv, (bmax[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    if t0 <= t1 {
        Some((t0, t1))
    } else {
        None
    }
}

/// Walk every voxel a ray segment intersects, in order, each exactly once.
///
/// Origins outside the grid start at the entry point; rays that miss the
/// grid entirely yield nothing. `visit` receives the voxel index and the
/// ray parameter at which the voxel was entered; returning `false` stops
/// the walk.
pub fn walk_voxels<F>(
    origin: &Point3<f64>,
    direction: &Vector3<f64>,
    max_range: f64,
    grid: &GridSpec,
    mut visit: F,
) where
    F: FnMut(VoxelIdx, f64) -> bool,
{
    let (gmin, gmax) = (grid.world_min(), grid.world_max());
    let Some((t_enter, t_exit)) = ray_box_interval(origin, direction, &gmin, &gmax) else {
        return;
    };
    let t_start = t_enter.max(0.0);
    let t_end = t_exit.min(max_range);
    if t_start > t_end {
        return;
    }
    // Nudge into the grid to get a well-defined starting voxel.
    let eps = grid.voxel_size * 1e-7;
    let start = origin + direction * (t_start + eps);
    let Some(mut idx) = grid.world_to_voxel(&start) else {
        return;
    };

    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if direction[a] > 1e-15 {
            step[a] = 1;
            let boundary = grid.origin[a] + (idx[a] as f64 + 1.0) * grid.voxel_size;
            t_max[a] = (boundary - origin[a]) / direction[a];
            t_delta[a] = grid.voxel_size / direction[a];
        } else if direction[a] < -1e-15 {
            step[a] = -1;
            let boundary = grid.origin[a] + idx[a] as f64 * grid.voxel_size;
            t_max[a] = (boundary - origin[a]) / direction[a];
            t_delta[a] = -grid.voxel_size / direction[a];
        }
    }

    let mut t = t_start;
    loop {
        if !visit(idx, t) {
            return;
        }
        // Advance along the axis with the nearest boundary crossing.
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        t = t_max[axis];
        if t > t_end {
            return;
        }
        let next = idx[axis] as isize + step[axis];
        if next < 0 || next as usize >= grid.dims[axis] {
            return;
        }
        idx[axis] = next as usize;
        t_max[axis] += t_delta[axis];
    }
}

/// Ordered list of voxels a ray segment intersects.
pub fn traverse_voxels(
    origin: &Point3<f64>,
    direction: &Vector3<f64>,
    max_range: f64,
    grid: &GridSpec,
) -> Vec<VoxelIdx> {
    let mut out = Vec::new();
    walk_voxels(origin, direction, max_range, grid, |idx, _| {
        out.push(idx);
        true
    });
    out
}

/// A voxel visible from a pose, with the flag marking an occupied first hit.
pub type VisibleVoxel = (VoxelIdx, bool);

/// Cast one ray per strided pixel and collect the visible voxel set V(n).
///
/// Each ray accumulates voxels until it reaches an Occupied voxel (included
/// and flagged as a hit) or runs out of range. Unknown voxels are counted
/// and treated as transparent: whether they block the view cannot be known
/// yet, and stopping at the frontier shell would make an unexplored room
/// score no better than the residual noise at an already-scanned spot. The
/// union over rays is deduplicated; a voxel hit by any ray keeps the flag.
pub fn visible_voxels<S>(
    pose: &ViewPose,
    frustum: &FrustumSpec,
    grid: &GridSpec,
    state: S,
) -> Vec<VisibleVoxel>
where
    S: Fn(VoxelIdx) -> OccupancyState,
{
    let mut order: Vec<VoxelIdx> = Vec::new();
    let mut seen: std::collections::HashMap<usize, (usize, bool)> = std::collections::HashMap::new();
    let intr = &frustum.intrinsics;
    let mut v = 0;
    while v < intr.height {
        let mut u = 0;
        while u < intr.width {
            let dir = ray_direction(u, v, intr, pose);
            walk_voxels(&pose.position, &dir, frustum.max_range, grid, |idx, _| {
                let st = state(idx);
                let hit = st == OccupancyState::Occupied;
                let lin = grid.linear(idx);
                match seen.entry(lin) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let slot = e.get_mut();
                        slot.1 |= hit;
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert((order.len(), hit));
                        order.push(idx);
                    }
                }
                // Only Occupied voxels terminate the ray.
                st != OccupancyState::Occupied
            });
            u += frustum.stride;
        }
        v += frustum.stride;
    }
    order
        .into_iter()
        .map(|idx| {
            let (_, hit) = seen[&grid.linear(idx)];
            (idx, hit)
        })
        .collect()
}

/// Shortest absolute difference between two angles, in (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % std::f64::consts::TAU;
    if x > std::f64::consts::PI {
        x -= std::f64::consts::TAU;
    } else if x <= -std::f64::consts::PI {
        x += std::f64::consts::TAU;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(160, 120, 74.0)
    }

    #[test]
    fn center_pixel_is_forward() {
        let pose = ViewPose::new(Point3::origin(), 0.0, 0.0);
        // 160x120 has no exact center pixel; average the two middle columns.
        let d1 = ray_direction(79, 59, &intr(), &pose);
        let d2 = ray_direction(80, 60, &intr(), &pose);
        let mid = (d1 + d2).normalize();
        assert_relative_eq!(mid.x, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn pitch_down_looks_down() {
        let pose = ViewPose::new(Point3::origin(), 0.0, -std::f64::consts::FRAC_PI_2);
        let d1 = ray_direction(79, 59, &intr(), &pose);
        let d2 = ray_direction(80, 60, &intr(), &pose);
        let mid = (d1 + d2).normalize();
        assert_relative_eq!(mid.z, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn corner_pixel_angle_matches_closed_form() {
        let pose = ViewPose::new(Point3::origin(), 0.0, 0.0);
        let ci = intr();
        let d = ray_direction(0, 0, &ci, &pose);
        let f = ci.focal();
        let (cx, cy) = ci.principal_point();
        let dx = (0.5 - cx) / f;
        let dy = (0.5 - cy) / f;
        let expect = (dx * dx + dy * dy).sqrt().atan();
        let got = d.dot(&Vector3::x()).acos();
        assert_relative_eq!(got, expect, epsilon = 1e-9);
    }

    #[test]
    fn axis_aligned_ray_visits_consecutive_voxels() {
        let grid = GridSpec::new(Point3::origin(), 0.1, [20, 20, 20]);
        let origin = Point3::new(0.05, 0.05, 0.05);
        let vox = traverse_voxels(&origin, &Vector3::x(), 0.5, &grid);
        assert!(vox.len() == 5 || vox.len() == 6, "got {}", vox.len());
        for (i, w) in vox.windows(2).enumerate() {
            assert_eq!(w[1][0], w[0][0] + 1, "non-consecutive at {i}");
            assert_eq!(w[1][1], w[0][1]);
            assert_eq!(w[1][2], w[0][2]);
        }
    }

    #[test]
    fn diagonal_ray_matches_dense_sampler() {
        let grid = GridSpec::new(Point3::origin(), 0.1, [30, 30, 30]);
        let origin = Point3::new(0.131, 0.217, 0.083);
        let dir = Vector3::new(1.0, 0.7, 0.4).normalize();
        let range = 2.3;
        let walked: std::collections::BTreeSet<_> =
            traverse_voxels(&origin, &dir, range, &grid).into_iter().collect();
        let mut dense = std::collections::BTreeSet::new();
        let step = grid.voxel_size / 20.0;
        let mut t = 0.0;
        while t <= range {
            if let Some(idx) = grid.world_to_voxel(&(origin + dir * t)) {
                dense.insert(idx);
            }
            t += step;
        }
        // The dense sampler can miss corner-clips; every sampled voxel must
        // be walked, and the walk may include at most a few extras.
        for idx in &dense {
            assert!(walked.contains(idx), "walk missed {idx:?}");
        }
        assert!(walked.len() <= dense.len() + 3);
    }

    #[test]
    fn ray_outside_grid_is_empty() {
        let grid = GridSpec::new(Point3::origin(), 0.1, [10, 10, 10]);
        let origin = Point3::new(-5.0, -5.0, -5.0);
        let vox = traverse_voxels(&origin, &Vector3::x(), 3.0, &grid);
        assert!(vox.is_empty());
    }

    #[test]
    fn ray_entering_from_outside_starts_at_entry() {
        let grid = GridSpec::new(Point3::origin(), 0.1, [10, 10, 10]);
        let origin = Point3::new(-0.25, 0.05, 0.05);
        let vox = traverse_voxels(&origin, &Vector3::x(), 10.0, &grid);
        assert_eq!(vox.first(), Some(&[0, 0, 0]));
        assert_eq!(vox.len(), 10);
    }

    #[test]
    fn no_voxel_repeats_and_t_monotone() {
        let grid = GridSpec::new(Point3::origin(), 0.05, [40, 40, 40]);
        let origin = Point3::new(0.012, 1.7, 0.3);
        let dir = Vector3::new(0.9, -0.6, 0.35).normalize();
        let mut ts = Vec::new();
        let mut seen = std::collections::HashSet::new();
        walk_voxels(&origin, &dir, 5.0, &grid, |idx, t| {
            assert!(seen.insert(idx), "repeat {idx:?}");
            ts.push(t);
            true
        });
        assert!(ts.windows(2).all(|w| w[1] >= w[0]));
        assert!(!ts.is_empty());
    }

    #[test]
    fn wall_shadows_voxels_behind_it() {
        let grid = GridSpec::new(Point3::origin(), 0.1, [30, 30, 10]);
        // Wall occupies x index 15, all y/z.
        let state = |idx: VoxelIdx| {
            if idx[0] == 15 {
                OccupancyState::Occupied
            } else {
                OccupancyState::Free
            }
        };
        let pose = ViewPose::new(Point3::new(0.5, 1.5, 0.5), 0.0, 0.0);
        let frustum = FrustumSpec::new(intr(), 5.0, 4);
        let vis = visible_voxels(&pose, &frustum, &grid, state);
        assert!(!vis.is_empty());
        for (idx, hit) in &vis {
            assert!(idx[0] <= 15, "voxel behind wall: {idx:?}");
            assert_eq!(*hit, idx[0] == 15);
        }
        assert!(vis.iter().any(|(idx, _)| idx[0] == 15));
    }

    #[test]
    fn short_range_excludes_wall() {
        let grid = GridSpec::new(Point3::origin(), 0.1, [30, 30, 10]);
        let state = |idx: VoxelIdx| {
            if idx[0] == 15 {
                OccupancyState::Occupied
            } else {
                OccupancyState::Free
            }
        };
        let pose = ViewPose::new(Point3::new(0.5, 1.5, 0.5), 0.0, 0.0);
        let frustum = FrustumSpec::new(intr(), 0.8, 4);
        let vis = visible_voxels(&pose, &frustum, &grid, state);
        assert!(vis.iter().all(|(idx, _)| idx[0] < 15));
    }

    #[test]
    fn all_free_map_has_no_hits_and_is_deterministic() {
        let grid = GridSpec::new(Point3::origin(), 0.1, [30, 30, 10]);
        let pose = ViewPose::new(Point3::new(0.5, 1.5, 0.5), 0.3, -0.1);
        let frustum = FrustumSpec::new(intr(), 2.0, 4);
        let a = visible_voxels(&pose, &frustum, &grid, |_| OccupancyState::Free);
        let b = visible_voxels(&pose, &frustum, &grid, |_| OccupancyState::Free);
        assert_eq!(a, b);
        assert!(a.iter().all(|(_, hit)| !hit));
        assert!(!a.is_empty());
    }

    #[test]
    fn unknown_is_transparent_until_occupied() {
        let grid = GridSpec::new(Point3::origin(), 0.1, [30, 30, 10]);
        // An unknown slab in front of a wall: rays see through the slab and
        // still stop at the wall.
        let state = |idx: VoxelIdx| {
            if idx[0] == 15 {
                OccupancyState::Occupied
            } else if idx[0] >= 10 {
                OccupancyState::Unknown
            } else {
                OccupancyState::Free
            }
        };
        let pose = ViewPose::new(Point3::new(0.5, 1.5, 0.5), 0.0, 0.0);
        let frustum = FrustumSpec::new(intr(), 5.0, 4);
        let vis = visible_voxels(&pose, &frustum, &grid, state);
        assert!(vis.iter().any(|(idx, _)| idx[0] > 10 && idx[0] < 15));
        assert!(vis.iter().all(|(idx, _)| idx[0] <= 15));
        // Unknown is included but not a hit; the wall is the hit.
        assert!(vis.iter().filter(|(idx, _)| idx[0] < 15).all(|(_, h)| !h));
        assert!(vis.iter().filter(|(idx, _)| idx[0] == 15).all(|(_, h)| *h));
    }
}
