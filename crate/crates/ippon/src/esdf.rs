//! Euclidean signed distance field from occupancy, collision-sphere
//! traversability checks and manually marked untraversable regions.
//!
//! Distances are measured between voxel centers: positive outside
//! obstacles, negative inside. Voxels never observed carry no distance
//! data; queries there return `None` and traversability is optimistic.

use nalgebra::{Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, ViewPose};
use crate::grid::{GridSpec, VoxelIdx};
use crate::voxel_map::{OccupancyState, VoxelMap};

/// Distance cap in meters; cells farther than this from any obstacle
/// saturate at the cap.
pub const ESDF_MAX_DISTANCE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnknownAs {
    Obstacle,
    Free,
}

#[derive(Debug, Clone)]
pub struct EsdfGrid {
    grid: GridSpec,
    dist: Vec<f32>,
    valid: Vec<bool>,
}

impl EsdfGrid {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Signed distance at a voxel, `None` when the voxel carries no data.
    pub fn at(&self, idx: VoxelIdx) -> Option<f64> {
        let lin = self.grid.linear(idx);
        self.valid[lin].then(|| self.dist[lin] as f64)
    }

    /// Nearest-voxel lookup at a world point.
    pub fn sample(&self, p: &Point3<f64>) -> Option<f64> {
        self.at(self.grid.world_to_voxel(p)?)
    }
}

/// One squared-distance pass of the Felzenszwalb-Huttenlocher transform.
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY && f[v[k]] == f64::INFINITY {
            continue;
        }
        let mut s = loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break s;
            }
        };
        if s.is_nan() {
            s = f64::NEG_INFINITY;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (in voxel units) to the nearest seed.
fn edt3(grid: &GridSpec, seed: &[bool]) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims;
    let inf = f64::INFINITY;
    let mut d: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { inf }).collect();
    let maxn = nx.max(ny).max(nz);
    let mut line = vec![0.0f64; maxn];
    let mut out = vec![0.0f64; maxn];
    // X pass
    for z in 0..nz {
        for y in 0..ny {
            let base = (z * ny + y) * nx;
            line[..nx].copy_from_slice(&d[base..base + nx]);
            dt_1d(&line[..nx], &mut out[..nx]);
            d[base..base + nx].copy_from_slice(&out[..nx]);
        }
    }
    // Y pass
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = d[(z * ny + y) * nx + x];
            }
            dt_1d(&line[..ny], &mut out[..ny]);
            for y in 0..ny {
                d[(z * ny + y) * nx + x] = out[y];
            }
        }
    }
    // Z pass
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = d[(z * ny + y) * nx + x];
            }
            dt_1d(&line[..nz], &mut out[..nz]);
            for z in 0..nz {
                d[(z * ny + y) * nx + x] = out[z];
            }
        }
    }
    d
}

/// Batch ESDF from explicit masks. `observed` marks voxels that carry data.
pub fn compute_esdf_masks(grid: &GridSpec, occupied: &[bool], observed: &[bool]) -> EsdfGrid {
    assert_eq!(occupied.len(), grid.voxel_count());
    assert_eq!(observed.len(), grid.voxel_count());
    let vs = grid.voxel_size;
    let any_occ = occupied.iter().any(|&o| o);
    let dist: Vec<f32> = if !any_occ {
        vec![ESDF_MAX_DISTANCE as f32; grid.voxel_count()]
    } else {
        let outer = edt3(grid, occupied);
        let free_mask: Vec<bool> = occupied.iter().map(|&o| !o).collect();
        let inner = edt3(grid, &free_mask);
        occupied
            .iter()
            .enumerate()
            .map(|(i, &occ)| {
                if occ {
                    (-(inner[i].sqrt() * vs)) as f32
                } else {
                    (outer[i].sqrt() * vs).min(ESDF_MAX_DISTANCE) as f32
                }
            })
            .collect()
    };
    EsdfGrid {
        grid: grid.clone(),
        dist,
        valid: observed.to_vec(),
    }
}

/// Batch ESDF recomputation over a map snapshot.
pub fn compute_esdf(map: &VoxelMap, unknown_as: UnknownAs) -> EsdfGrid {
    let grid = map.grid();
    let n = grid.voxel_count();
    let mut occupied = vec![false; n];
    let mut observed = vec![false; n];
    for lin in 0..n {
        let state = map.occupancy_state(grid.from_linear(lin));
        match state {
            OccupancyState::Occupied => {
                occupied[lin] = true;
                observed[lin] = true;
            }
            OccupancyState::Free => observed[lin] = true,
            OccupancyState::Unknown => {
                if unknown_as == UnknownAs::Obstacle {
                    occupied[lin] = true;
                    observed[lin] = true;
                }
            }
        }
    }
    compute_esdf_masks(grid, &occupied, &observed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionSphere {
    /// Offset from the pose position, in the robot frame (rotated by yaw).
    pub offset: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClearanceMode {
    SoftPenalty,
    HardConstraint,
}

/// Base spheres check ground contact, body spheres check collision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionModel {
    pub base: Vec<CollisionSphere>,
    pub body: Vec<CollisionSphere>,
    pub clearance_radius: f64,
    pub clearance_mode: ClearanceMode,
}

impl CollisionModel {
    /// Cylinder-like robot, 1.41 m tall with radius 0.17 m, as one base
    /// sphere plus a stack of body spheres. Offsets are relative to the
    /// camera position at `camera_height` above the ground.
    pub fn cylinder(camera_height: f64) -> Self {
        let z = |h: f64| h - camera_height;
        Self {
            base: vec![CollisionSphere {
                offset: Vector3::new(0.0, 0.0, z(0.12)),
                radius: 0.30,
            }],
            body: [0.45, 0.75, 1.05, 1.30]
                .iter()
                .map(|&h| CollisionSphere {
                    offset: Vector3::new(0.0, 0.0, z(h)),
                    radius: 0.20,
                })
                .collect(),
            clearance_radius: 0.30,
            clearance_mode: ClearanceMode::SoftPenalty,
        }
    }

    fn world_center(&self, pose: &ViewPose, s: &CollisionSphere) -> Point3<f64> {
        let (sy, cy) = pose.yaw.sin_cos();
        pose.position
            + Vector3::new(
                cy * s.offset.x - sy * s.offset.y,
                sy * s.offset.x + cy * s.offset.y,
                s.offset.z,
            )
    }
}

/// Triangular ground-plane region with a height band, marked untraversable
/// after a collision event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UntraversableRegion {
    pub vertices: [Point2<f64>; 3],
    pub z_min: f64,
    pub z_max: f64,
}

impl UntraversableRegion {
    pub fn new(vertices: [Point2<f64>; 3], z_min: f64, z_max: f64) -> Self {
        let [a, b, c] = &vertices;
        let area2 = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        assert!(area2.abs() > 1e-9, "degenerate triangle");
        Self {
            vertices,
            z_min,
            z_max,
        }
    }

    /// Isoceles triangle ahead of a pose: apex at the robot, opening 60
    /// degrees, given depth along the heading.
    pub fn ahead_of(pose: &ViewPose, depth: f64, z_min: f64, z_max: f64) -> Self {
        let apex = Point2::new(pose.position.x, pose.position.y);
        let half = 30.0_f64.to_radians();
        let mk = |ang: f64| {
            let d = depth / half.cos();
            Point2::new(apex.x + d * (pose.yaw + ang).cos(), apex.y + d * (pose.yaw + ang).sin())
        };
        Self::new([apex, mk(-half), mk(half)], z_min, z_max)
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        if p.z < self.z_min || p.z > self.z_max {
            return false;
        }
        let [a, b, c] = &self.vertices;
        let sign = |p1: &Point2<f64>, p2: &Point2<f64>| {
            (p.x - p2.x) * (p1.y - p2.y) - (p1.x - p2.x) * (p.y - p2.y)
        };
        let d1 = sign(a, b);
        let d2 = sign(b, c);
        let d3 = sign(c, a);
        let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
        let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
        !(has_neg && has_pos)
    }
}

/// Episode-lived set of marked regions; union semantics.
#[derive(Debug, Clone, Default)]
pub struct RegionSet {
    regions: Vec<UntraversableRegion>,
}

impl RegionSet {
    pub fn mark_untraversable(&mut self, region: UntraversableRegion) {
        self.regions.push(region);
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        self.regions.iter().any(|r| r.contains(p))
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Collision-optimistic traversability: a pose is untraversable iff any
/// base sphere has sdf >= r_base (no ground contact) or any body sphere
/// has sdf < r_body (collision). Spheres without distance data contribute
/// nothing. Hard clearance mode additionally requires body sdf >= the
/// clearance radius; marked regions always veto.
pub fn pose_traversable(
    pose: &ViewPose,
    model: &CollisionModel,
    esdf: &EsdfGrid,
    regions: &RegionSet,
) -> bool {
    if regions.contains(&pose.position) {
        return false;
    }
    for s in &model.base {
        if let Some(d) = esdf.sample(&model.world_center(pose, s)) {
            if d >= s.radius {
                return false;
            }
        }
    }
    for s in &model.body {
        if let Some(d) = esdf.sample(&model.world_center(pose, s)) {
            if d < s.radius {
                return false;
            }
            if model.clearance_mode == ClearanceMode::HardConstraint && d < model.clearance_radius {
                return false;
            }
        }
    }
    true
}

/// Interpolated straight-line check between two poses.
pub fn segment_traversable(
    a: &ViewPose,
    b: &ViewPose,
    model: &CollisionModel,
    esdf: &EsdfGrid,
    regions: &RegionSet,
    step: f64,
) -> bool {
    let dist = (b.position - a.position).norm();
    let n = (dist / step).ceil().max(1.0) as usize;
    let dyaw = wrap_angle(b.yaw - a.yaw);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let pose = ViewPose {
            position: a.position + (b.position - a.position) * t,
            yaw: a.yaw + dyaw * t,
            pitch: 0.0,
        };
        if !pose_traversable(&pose, model, esdf, regions) {
            return false;
        }
    }
    true
}

/// Minimum body-sphere distance at a pose; spheres without data count as
/// the cap.
pub fn pose_clearance(pose: &ViewPose, model: &CollisionModel, esdf: &EsdfGrid, cap: f64) -> f64 {
    let mut c = cap;
    for s in &model.body {
        if let Some(d) = esdf.sample(&model.world_center(pose, s)) {
            c = c.min(d.max(0.0));
        }
    }
    c
}

/// Clearance-penalized path cost: per segment, length plus
/// `weight / min(clearance along the segment, cap)`.
///
/// A single-pose path costs `weight / min(node clearance, cap)`. Any
/// untraversable waypoint signals infinite cost.
pub fn path_clearance_cost(
    path: &[ViewPose],
    model: &CollisionModel,
    esdf: &EsdfGrid,
    regions: &RegionSet,
    weight: f64,
    cap: f64,
) -> f64 {
    assert!(!path.is_empty());
    for p in path {
        if !pose_traversable(p, model, esdf, regions) {
            return f64::INFINITY;
        }
    }
    if path.len() == 1 {
        let c = pose_clearance(&path[0], model, esdf, cap).max(1e-6);
        return weight / c;
    }
    let mut total = 0.0;
    for w in path.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let len = (b.position - a.position).norm();
        let steps = ((len / (esdf.grid.voxel_size)).ceil() as usize).max(1);
        let mut min_c = f64::INFINITY;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let pose = ViewPose {
                position: a.position + (b.position - a.position) * t,
                yaw: a.yaw,
                pitch: 0.0,
            };
            min_c = min_c.min(pose_clearance(&pose, model, esdf, cap));
        }
        total += len + weight / min_c.min(cap).max(1e-6);
    }
    total
}
